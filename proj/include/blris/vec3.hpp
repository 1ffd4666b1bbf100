#pragma once

#include <cmath>
#include <cstddef>

namespace blris {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  Vec3& operator-=(const Vec3& o) {
    x -= o.x;
    y -= o.y;
    z -= o.z;
    return *this;
  }
  Vec3& operator*=(double s) {
    x *= s;
    y *= s;
    z *= s;
    return *this;
  }
  Vec3 operator-() const { return {-x, -y, -z}; }

  double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm2() const { return dot(*this); }
  double norm() const { return std::sqrt(norm2()); }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  Vec3 normalized() const {
    double n = norm();
    return n > 0.0 ? (*this) / n : Vec3{0, 0, 0};
  }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// Symmetric 3x3 matrix, enough for Hessians of potentials.
struct Sym3 {
  // xx, yy, zz, xy, xz, yz
  double a[6] = {0, 0, 0, 0, 0, 0};

  double xx() const { return a[0]; }
  double yy() const { return a[1]; }
  double zz() const { return a[2]; }
  double xy() const { return a[3]; }
  double xz() const { return a[4]; }
  double yz() const { return a[5]; }

  Sym3& operator+=(const Sym3& o) {
    for (int i = 0; i < 6; ++i) a[i] += o.a[i];
    return *this;
  }
  Sym3 operator+(const Sym3& o) const {
    Sym3 r = *this;
    r += o;
    return r;
  }
  Sym3 operator*(double s) const {
    Sym3 r = *this;
    for (double& v : r.a) v *= s;
    return r;
  }

  Vec3 apply(const Vec3& v) const {
    return {a[0] * v.x + a[3] * v.y + a[4] * v.z,
            a[3] * v.x + a[1] * v.y + a[5] * v.z,
            a[4] * v.x + a[5] * v.y + a[2] * v.z};
  }
  double quad(const Vec3& v) const { return v.dot(apply(v)); }
  double max_abs() const {
    double m = 0.0;
    for (double v : a) m = std::max(m, std::fabs(v));
    return m;
  }
};

}  // namespace blris
