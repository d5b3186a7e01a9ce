#pragma once

#include <boost/container/small_vector.hpp>
#include <cmath>
#include <cstddef>
#include <string>
#include <type_traits>
#include <utility>

#include "targeted_msm/errors.hpp"

namespace tmsm {

template <typename S>
class Dual;

template <typename T>
struct is_dual : std::false_type {};
template <typename S>
struct is_dual<Dual<S>> : std::true_type {};
template <typename T>
inline constexpr bool is_dual_v = is_dual<T>::value;

inline double primal(double x) { return x; }
template <typename S>
double primal(const Dual<S>& x) {
  return primal(x.value());
}

// Forward-mode scalar: a value plus a vector of first-order partials.
// Nesting (Dual<Dual<double>>) yields exact second-order derivatives.
// An empty partials vector means "exact constant" and broadcasts as zeros;
// two non-empty vectors of different lengths are an evaluation error.
template <typename S>
class Dual {
 public:
  using scalar_type = S;
  using partials_type = boost::container::small_vector<S, 4>;

  Dual() : v_{} {}
  Dual(S v) : v_(std::move(v)) {}  // constants promote implicitly

  template <typename U = S, typename = std::enable_if_t<is_dual_v<U>>>
  Dual(double v) : v_(S(v)) {}

  static Dual seeded(S v, std::size_t dim, std::size_t index) {
    Dual d(std::move(v));
    d.p_.resize(dim);
    d.p_[index] = S(1.0);
    return d;
  }

  static Dual with_partials(S v, partials_type p) {
    Dual d(std::move(v));
    d.p_ = std::move(p);
    return d;
  }

  const S& value() const { return v_; }
  std::size_t dim() const { return p_.size(); }
  const partials_type& partials() const { return p_; }

  // Partial by index with constant-as-zero semantics.
  S partial(std::size_t k) const { return k < p_.size() ? p_[k] : S{}; }

 private:
  S v_;
  partials_type p_;
};

namespace detail {

template <typename S>
void check_dims(const Dual<S>& a, const Dual<S>& b, const char* op) {
  if (!a.partials().empty() && !b.partials().empty() &&
      a.partials().size() != b.partials().size()) {
    throw Error(errc::eval, std::string("derivative dimension mismatch in '") +
                                op + "': " + std::to_string(a.partials().size()) +
                                " vs " + std::to_string(b.partials().size()));
  }
}

// out = da * a.partials + db * b.partials, empty side treated as zero.
template <typename S>
typename Dual<S>::partials_type combine(const Dual<S>& a, const S& da,
                                        const Dual<S>& b, const S& db) {
  const auto& pa = a.partials();
  const auto& pb = b.partials();
  typename Dual<S>::partials_type out;
  const std::size_t n = pa.size() > pb.size() ? pa.size() : pb.size();
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < pa.size() && i < pb.size())
      out[i] = pa[i] * da + pb[i] * db;
    else if (i < pa.size())
      out[i] = pa[i] * da;
    else
      out[i] = pb[i] * db;
  }
  return out;
}

template <typename S>
typename Dual<S>::partials_type scale(const Dual<S>& a, const S& da) {
  typename Dual<S>::partials_type out;
  out.resize(a.partials().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.partials()[i] * da;
  return out;
}

}  // namespace detail

template <typename S>
Dual<S> operator+(const Dual<S>& a, const Dual<S>& b) {
  detail::check_dims(a, b, "+");
  const auto& pa = a.partials();
  const auto& pb = b.partials();
  typename Dual<S>::partials_type out;
  const std::size_t n = pa.size() > pb.size() ? pa.size() : pb.size();
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < pa.size() && i < pb.size())
      out[i] = pa[i] + pb[i];
    else if (i < pa.size())
      out[i] = pa[i];
    else
      out[i] = pb[i];
  }
  return Dual<S>::with_partials(a.value() + b.value(), std::move(out));
}

template <typename S>
Dual<S> operator-(const Dual<S>& a, const Dual<S>& b) {
  detail::check_dims(a, b, "-");
  const auto& pa = a.partials();
  const auto& pb = b.partials();
  typename Dual<S>::partials_type out;
  const std::size_t n = pa.size() > pb.size() ? pa.size() : pb.size();
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < pa.size() && i < pb.size())
      out[i] = pa[i] - pb[i];
    else if (i < pa.size())
      out[i] = pa[i];
    else
      out[i] = -pb[i];
  }
  return Dual<S>::with_partials(a.value() - b.value(), std::move(out));
}

template <typename S>
Dual<S> operator-(const Dual<S>& a) {
  typename Dual<S>::partials_type out;
  out.resize(a.partials().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a.partials()[i];
  return Dual<S>::with_partials(-a.value(), std::move(out));
}

template <typename S>
Dual<S> operator*(const Dual<S>& a, const Dual<S>& b) {
  detail::check_dims(a, b, "*");
  return Dual<S>::with_partials(a.value() * b.value(),
                                detail::combine(a, b.value(), b, a.value()));
}

template <typename S>
Dual<S> operator/(const Dual<S>& a, const Dual<S>& b) {
  detail::check_dims(a, b, "/");
  if (primal(b.value()) == 0.0)
    throw Error(errc::eval, "division by zero in '/' during derivative evaluation");
  S q = a.value() / b.value();
  S inv = S(1.0) / b.value();
  return Dual<S>::with_partials(std::move(q),
                                detail::combine(a, inv, b, -(a.value() * inv * inv)));
}

// Mixed double operands avoid allocating constant partials.
template <typename S>
Dual<S> operator+(const Dual<S>& a, double c) {
  return Dual<S>::with_partials(a.value() + S(c), typename Dual<S>::partials_type(a.partials()));
}
template <typename S>
Dual<S> operator+(double c, const Dual<S>& a) {
  return a + c;
}
template <typename S>
Dual<S> operator-(const Dual<S>& a, double c) {
  return a + (-c);
}
template <typename S>
Dual<S> operator-(double c, const Dual<S>& a) {
  return (-a) + c;
}
template <typename S>
Dual<S> operator*(const Dual<S>& a, double c) {
  return Dual<S>::with_partials(a.value() * S(c), detail::scale(a, S(c)));
}
template <typename S>
Dual<S> operator*(double c, const Dual<S>& a) {
  return a * c;
}
template <typename S>
Dual<S> operator/(const Dual<S>& a, double c) {
  if (c == 0.0)
    throw Error(errc::eval, "division by zero in '/' during derivative evaluation");
  return a * (1.0 / c);
}
template <typename S>
Dual<S> operator/(double c, const Dual<S>& a) {
  return Dual<S>(S(c)) / a;
}

template <typename S>
Dual<S> exp(const Dual<S>& a) {
  using std::exp;
  S e = exp(a.value());
  return Dual<S>::with_partials(e, detail::scale(a, e));
}

template <typename S>
Dual<S> log(const Dual<S>& a) {
  using std::log;
  if (primal(a.value()) <= 0.0)
    throw Error(errc::eval, "log of non-positive value during derivative evaluation");
  return Dual<S>::with_partials(log(a.value()), detail::scale(a, S(1.0) / a.value()));
}

template <typename S>
Dual<S> log1p(const Dual<S>& a) {
  using std::log1p;
  if (primal(a.value()) <= -1.0)
    throw Error(errc::eval, "log1p of value <= -1 during derivative evaluation");
  return Dual<S>::with_partials(log1p(a.value()), detail::scale(a, S(1.0) / (S(1.0) + a.value())));
}

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename S>
Dual<S> logistic(const Dual<S>& a) {
  S s = logistic(a.value());
  return Dual<S>::with_partials(s, detail::scale(a, s * (S(1.0) - s)));
}

inline double log_sigmoid(double x) {
  return x < 0.0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
}

template <typename S>
Dual<S> log_sigmoid(const Dual<S>& a) {
  return Dual<S>::with_partials(log_sigmoid(a.value()),
                                detail::scale(a, logistic(-a.value())));
}

template <typename S>
Dual<S> pow(const Dual<S>& a, double k) {
  using std::floor;
  using std::pow;
  const double base = primal(a.value());
  const bool integral = k == floor(k);
  if (!integral && base <= 0.0)
    throw Error(errc::eval, "pow of non-positive base with non-integer exponent");
  if (integral && base == 0.0 && k < 1.0)
    throw Error(errc::eval, "pow of zero base with exponent below one");
  S v = pow(a.value(), k);
  S d = S(k) * pow(a.value(), k - 1.0);
  return Dual<S>::with_partials(std::move(v), detail::scale(a, d));
}

// Plain-scalar overloads so generic model/loss code can call the primitives
// uniformly on double and on any dual layer.
using std::exp;
using std::log;
using std::log1p;
using std::pow;

}  // namespace tmsm
