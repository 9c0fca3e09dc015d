#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "weakseg/rng.hpp"

namespace weakseg {

// Loss-shaping exponents for the two slide classes.
struct BetaParams {
  double beta0 = 0.0;  // benign class, in [0, 1)
  double beta1 = 0.0;  // malign class, in [0, 1]

  void validate() const {
    if (!(beta0 >= 0.0 && beta0 < 1.0)) throw std::invalid_argument("beta0 must be in [0,1)");
    if (!(beta1 >= 0.0 && beta1 <= 1.0)) throw std::invalid_argument("beta1 must be in [0,1]");
  }
};

// Label-noise description of a dataset: gamma is the probability that a
// patch from a malign slide contains no malign pixel, r the benign ratio.
struct NoiseSetting {
  double gamma = 0.0;
  double r = 0.5;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must be in [0,1]");
    if (!(r > 0.0 && r < 1.0)) throw std::invalid_argument("r must be in (0,1)");
  }
};

// One-pixel model: P(malign | benign pixel) = theta0, P(malign | malign pixel) = theta1.
struct TrivialModelParams {
  double theta0 = 0.5;
  double theta1 = 0.5;

  void validate() const {
    if (!(theta0 > 0.0 && theta0 < 1.0) || !(theta1 > 0.0 && theta1 < 1.0))
      throw std::invalid_argument("theta components must be in (0,1)");
  }
};

namespace detail {

inline void check_distribution(std::span<const double> p, const char* name) {
  if (p.size() < 2) throw std::invalid_argument(std::string(name) + ": needs at least 2 classes");
  double sum = 0.0;
  for (double x : p) {
    if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument(std::string(name) + ": entry outside [0,1]");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument(std::string(name) + ": does not sum to 1");
}

}  // namespace detail

// Shape-controlled generalization of the KL divergence,
//   L_beta(p || q) = -sum_i (p_i / beta_i) [ (q_i / p_i)^beta_i - 1 ],
// with the exact logarithmic limit p_i log(p_i / q_i) substituted where
// beta_i == 0. Terms with p_i == 0 contribute 0 (continuous extension).
inline double beta_divergence(std::span<const double> p, std::span<const double> q,
                              std::span<const double> beta) {
  if (p.size() != q.size() || p.size() != beta.size())
    throw std::invalid_argument("beta_divergence: length mismatch");
  detail::check_distribution(p, "p");
  detail::check_distribution(q, "q");
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    const double b = beta[i];
    if (!(b >= 0.0 && b <= 1.0)) throw std::invalid_argument("beta_divergence: beta outside [0,1]");
    if (b == 0.0) {
      if (q[i] == 0.0)
        throw std::domain_error("beta_divergence: q_i = 0 with p_i > 0 and beta_i = 0 is infinite");
      loss += p[i] * std::log(p[i] / q[i]);
    } else {
      loss += -(p[i] / b) * (std::pow(q[i] / p[i], b) - 1.0);
    }
  }
  return loss;
}

// d L_beta / d q_i = -(q_i / p_i)^(beta_i - 1) for p_i > 0 (limit -p_i/q_i at beta_i = 0);
// entries with p_i == 0 get gradient 0.
inline std::vector<double> beta_divergence_grad_q(std::span<const double> p,
                                                  std::span<const double> q,
                                                  std::span<const double> beta) {
  if (p.size() != q.size() || p.size() != beta.size())
    throw std::invalid_argument("beta_divergence_grad_q: length mismatch");
  detail::check_distribution(p, "p");
  detail::check_distribution(q, "q");
  std::vector<double> g(p.size(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    const double b = beta[i];
    if (!(b >= 0.0 && b <= 1.0)) throw std::invalid_argument("beta_divergence_grad_q: beta outside [0,1]");
    if (b == 1.0) {
      g[i] = -1.0;
    } else {
      if (q[i] == 0.0)
        throw std::domain_error("beta_divergence_grad_q: infinite gradient at q_i = 0 with beta_i < 1");
      g[i] = (b == 0.0) ? -p[i] / q[i] : -std::pow(q[i] / p[i], b - 1.0);
    }
  }
  return g;
}

// Two-class convenience wrappers (class 0 = benign, class 1 = malign).
inline double beta_divergence2(double p0, double p1, double q0, double q1, const BetaParams& beta) {
  const double p[2] = {p0, p1}, q[2] = {q0, q1}, b[2] = {beta.beta0, beta.beta1};
  return beta_divergence(p, q, b);
}

inline std::pair<double, double> beta_divergence2_grad_q(double p0, double p1, double q0, double q1,
                                                         const BetaParams& beta) {
  const double p[2] = {p0, p1}, q[2] = {q0, q1}, b[2] = {beta.beta0, beta.beta1};
  auto g = beta_divergence_grad_q(p, q, b);
  return {g[0], g[1]};
}

// ---- One-pixel model analysis ----
//
// Generative process: a benign slide (probability r) yields a benign pixel;
// a malign slide yields a benign pixel with probability gamma, else a malign
// pixel. Targets are the one-hot slide labels, so benign pixels from malign
// slides carry a wrong label.

// E_X[L_beta] of the one-pixel model under that process.
inline double trivial_model_expected_loss(const TrivialModelParams& theta, const NoiseSetting& noise,
                                          const BetaParams& beta) {
  theta.validate();
  noise.validate();
  beta.validate();
  const double benign_on_t0 = beta_divergence2(1.0, 0.0, 1.0 - theta.theta0, theta.theta0, beta);
  const double malign_on_t0 = beta_divergence2(0.0, 1.0, 1.0 - theta.theta0, theta.theta0, beta);
  const double malign_on_t1 = beta_divergence2(0.0, 1.0, 1.0 - theta.theta1, theta.theta1, beta);
  return noise.r * benign_on_t0 + (1.0 - noise.r) * noise.gamma * malign_on_t0 +
         (1.0 - noise.r) * (1.0 - noise.gamma) * malign_on_t1;
}

// Stationarity residual in theta0,
//   (1 - r) gamma theta0^(beta1 - 1) - r (1 - theta0)^(beta0 - 1).
// This equals the negative of d/dtheta0 of the expected loss above; either
// sign convention has the same root, which is the expected-loss minimizer.
inline double trivial_model_stationarity_residual(double theta0, const NoiseSetting& noise,
                                                  const BetaParams& beta) {
  if (!(theta0 > 0.0 && theta0 < 1.0)) throw std::invalid_argument("theta0 must be in (0,1)");
  noise.validate();
  beta.validate();
  return (1.0 - noise.r) * noise.gamma * std::pow(theta0, beta.beta1 - 1.0) -
         noise.r * std::pow(1.0 - theta0, beta.beta0 - 1.0);
}

// Root of the stationarity residual in (0,1), by bisection. The residual is
// strictly decreasing in theta0 over the admissible beta range, so a sign
// change brackets the unique minimizer.
inline double optimal_theta0(const NoiseSetting& noise, const BetaParams& beta) {
  noise.validate();
  beta.validate();
  if (!(noise.gamma > 0.0)) throw std::invalid_argument("optimal_theta0: gamma must be > 0");
  const double eps = 1e-12;
  double lo = eps, hi = 1.0 - eps;
  double flo = trivial_model_stationarity_residual(lo, noise, beta);
  double fhi = trivial_model_stationarity_residual(hi, noise, beta);
  if (!(flo > 0.0 && fhi < 0.0))
    throw std::domain_error("optimal_theta0: residual does not change sign on (eps, 1-eps)");
  while (hi - lo > 1e-10) {
    const double mid = 0.5 * (lo + hi);
    const double fm = trivial_model_stationarity_residual(mid, noise, beta);
    if (fm > 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

// Solve the stationarity condition for beta1 given a desired optimum theta0:
//   beta1 = (1/log theta0) [ (beta0 - 1) log(1 - theta0) - log((1-r) gamma / r) ] + 1.
inline double tune_beta1(double theta0_target, double beta0, const NoiseSetting& noise) {
  if (!(theta0_target > 0.0 && theta0_target < 1.0))
    throw std::invalid_argument("tune_beta1: theta0_target must be in (0,1)");
  if (!(beta0 >= 0.0 && beta0 < 1.0)) throw std::invalid_argument("tune_beta1: beta0 must be in [0,1)");
  noise.validate();
  if (!(noise.gamma > 0.0)) throw std::invalid_argument("tune_beta1: gamma must be > 0");
  return ((beta0 - 1.0) * std::log(1.0 - theta0_target) -
          std::log((1.0 - noise.r) * noise.gamma / noise.r)) /
             std::log(theta0_target) +
         1.0;
}

// ---- Stochastic check of the one-pixel analysis ----

struct TrivialSgdResult {
  double theta0_mean = 0.0;  // average over the trailing window
  double theta1_mean = 0.0;
  std::vector<double> theta0_trace;
};

// Plain SGD on samples drawn from the generative process, directly in theta
// space. The trailing 10% of the trajectory is averaged, matching how the
// analytic optimum is compared against.
inline TrivialSgdResult trivial_model_sgd(const NoiseSetting& noise, const BetaParams& beta,
                                          long steps, double learning_rate, std::uint64_t seed,
                                          bool keep_trace = false) {
  noise.validate();
  beta.validate();
  constexpr double kClamp = 1e-7;
  Rng rng(seed);
  double t0 = 0.5, t1 = 0.5;
  const long tail_start = steps - steps / 10;
  double acc0 = 0.0, acc1 = 0.0;
  long acc_n = 0;
  TrivialSgdResult res;
  if (keep_trace) res.theta0_trace.reserve(static_cast<std::size_t>(steps));
  for (long s = 0; s < steps; ++s) {
    const bool benign_slide = rng.bernoulli(noise.r);
    const bool benign_pixel = benign_slide || rng.bernoulli(noise.gamma);
    double& t = benign_pixel ? t0 : t1;
    double grad;
    if (benign_slide) {
      // target (1,0): dL/dtheta = (1-theta)^(beta0-1)
      grad = std::pow(1.0 - t, beta.beta0 - 1.0);
    } else {
      // target (0,1): dL/dtheta = -theta^(beta1-1)
      grad = -std::pow(t, beta.beta1 - 1.0);
    }
    t -= learning_rate * grad;
    t = std::min(1.0 - kClamp, std::max(kClamp, t));
    if (keep_trace) res.theta0_trace.push_back(t0);
    if (s >= tail_start) {
      acc0 += t0;
      acc1 += t1;
      ++acc_n;
    }
  }
  res.theta0_mean = acc0 / static_cast<double>(acc_n);
  res.theta1_mean = acc1 / static_cast<double>(acc_n);
  return res;
}

}  // namespace weakseg
