// Training losses with analytic gradients. Everything is templated on the
// scalar type: double for gradient checks, float inside the training loop.
#pragma once

#include <vector>

#include "kxr/common.hpp"

namespace kxr::losses {

constexpr double kProbEps = 1e-7;  // probabilities are clamped to [eps, 1-eps]

template <class T>
T clamp_prob(T p) {
  return std::clamp(p, static_cast<T>(kProbEps), static_cast<T>(1.0 - kProbEps));
}

// ---- MSE -------------------------------------------------------------------

template <class T>
T mse(const std::vector<T>& pred, const std::vector<T>& target) {
  if (pred.size() != target.size() || pred.empty())
    throw UsageError("mse: length mismatch or empty input");
  T acc = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    acc += d * d;
  }
  return acc / static_cast<T>(pred.size());
}

template <class T>
std::vector<T> mse_grad(const std::vector<T>& pred, const std::vector<T>& target) {
  if (pred.size() != target.size() || pred.empty())
    throw UsageError("mse: length mismatch or empty input");
  std::vector<T> g(pred.size());
  const T inv_n = static_cast<T>(1) / static_cast<T>(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) g[i] = 2 * (pred[i] - target[i]) * inv_n;
  return g;
}

// ---- Binary cross-entropy --------------------------------------------------

template <class T>
T bce(T prob, int label) {
  const T p = clamp_prob(prob);
  return label ? -std::log(p) : -std::log(1 - p);
}

template <class T>
T bce(const std::vector<T>& probs, const std::vector<int>& labels) {
  if (probs.size() != labels.size() || probs.empty())
    throw UsageError("bce: length mismatch or empty input");
  T acc = 0;
  for (size_t i = 0; i < probs.size(); ++i) acc += bce(probs[i], labels[i]);
  return acc / static_cast<T>(probs.size());
}

template <class T>
std::vector<T> bce_grad(const std::vector<T>& probs, const std::vector<int>& labels) {
  if (probs.size() != labels.size() || probs.empty())
    throw UsageError("bce: length mismatch or empty input");
  std::vector<T> g(probs.size());
  const T inv_n = static_cast<T>(1) / static_cast<T>(probs.size());
  for (size_t i = 0; i < probs.size(); ++i) {
    const T p = clamp_prob(probs[i]);
    g[i] = (labels[i] ? -1 / p : 1 / (1 - p)) * inv_n;
  }
  return g;
}

// ---- Focal -----------------------------------------------------------------

template <class T>
T label_pt(T p, int label) {
  return label ? p : 1 - p;
}

template <class T>
T focal(T prob, int label, T gamma = 2, T alpha = static_cast<T>(0.25)) {
  const T p = clamp_prob(prob);
  const T pt = label ? p : 1 - p;
  const T at = label ? alpha : 1 - alpha;
  return -at * std::pow(1 - pt, gamma) * std::log(pt);
}

template <class T>
T focal(const std::vector<T>& probs, const std::vector<int>& labels, T gamma = 2,
        T alpha = static_cast<T>(0.25)) {
  if (probs.size() != labels.size() || probs.empty())
    throw UsageError("focal: length mismatch or empty input");
  T acc = 0;
  for (size_t i = 0; i < probs.size(); ++i) acc += focal(probs[i], labels[i], gamma, alpha);
  return acc / static_cast<T>(probs.size());
}

template <class T>
std::vector<T> focal_grad(const std::vector<T>& probs, const std::vector<int>& labels, T gamma = 2,
                          T alpha = static_cast<T>(0.25)) {
  if (probs.size() != labels.size() || probs.empty())
    throw UsageError("focal: length mismatch or empty input");
  std::vector<T> g(probs.size());
  const T inv_n = static_cast<T>(1) / static_cast<T>(probs.size());
  for (size_t i = 0; i < probs.size(); ++i) {
    const T p = clamp_prob(probs[i]);
    const T pt = label_pt(p, labels[i]);
    const T at = labels[i] ? alpha : 1 - alpha;
    // d/dpt of -at (1-pt)^g ln(pt), then dpt/dp = +-1
    const T dpt = at * std::pow(1 - pt, gamma - 1) * (gamma * std::log(pt) - (1 - pt) / pt);
    g[i] = (labels[i] ? dpt : -dpt) * inv_n;
  }
  return g;
}

// ---- Smooth L1 -------------------------------------------------------------

template <class T>
T smooth_l1(const std::vector<T>& pred, const std::vector<T>& target, T beta = 1) {
  if (pred.size() != target.size() || pred.empty())
    throw UsageError("smooth_l1: length mismatch or empty input");
  if (!(beta > 0)) throw UsageError("smooth_l1: beta must be positive");
  T acc = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    const T ad = std::abs(d);
    acc += ad < beta ? static_cast<T>(0.5) * d * d / beta : ad - static_cast<T>(0.5) * beta;
  }
  return acc / static_cast<T>(pred.size());
}

template <class T>
std::vector<T> smooth_l1_grad(const std::vector<T>& pred, const std::vector<T>& target, T beta = 1) {
  if (pred.size() != target.size() || pred.empty())
    throw UsageError("smooth_l1: length mismatch or empty input");
  if (!(beta > 0)) throw UsageError("smooth_l1: beta must be positive");
  std::vector<T> g(pred.size());
  const T inv_n = static_cast<T>(1) / static_cast<T>(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    g[i] = (std::abs(d) < beta ? d / beta : (d > 0 ? T{1} : T{-1})) * inv_n;
  }
  return g;
}

// ---- Dice ------------------------------------------------------------------

template <class T>
T dice(const std::vector<T>& prob, const std::vector<T>& gt) {
  if (prob.size() != gt.size() || prob.empty()) throw UsageError("dice: shape mismatch or empty input");
  T inter = 0, psum = 0, gsum = 0;
  for (size_t i = 0; i < prob.size(); ++i) {
    inter += prob[i] * gt[i];
    psum += prob[i];
    gsum += gt[i];
  }
  const T smooth = 1;
  return 1 - (2 * inter + smooth) / (psum + gsum + smooth);
}

template <class T>
std::vector<T> dice_grad(const std::vector<T>& prob, const std::vector<T>& gt) {
  if (prob.size() != gt.size() || prob.empty()) throw UsageError("dice: shape mismatch or empty input");
  T inter = 0, psum = 0, gsum = 0;
  for (size_t i = 0; i < prob.size(); ++i) {
    inter += prob[i] * gt[i];
    psum += prob[i];
    gsum += gt[i];
  }
  const T smooth = 1;
  const T num = 2 * inter + smooth;
  const T den = psum + gsum + smooth;
  std::vector<T> g(prob.size());
  for (size_t i = 0; i < prob.size(); ++i) g[i] = -(2 * gt[i] * den - num) / (den * den);
  return g;
}

// ---- Cross-entropy over a probability vector --------------------------------

template <class T>
T cross_entropy(const std::vector<T>& probs, size_t label) {
  if (label >= probs.size()) throw UsageError("cross_entropy: label index out of range");
  return -std::log(clamp_prob(probs[label]));
}

template <class T>
std::vector<T> cross_entropy_grad(const std::vector<T>& probs, size_t label) {
  if (label >= probs.size()) throw UsageError("cross_entropy: label index out of range");
  std::vector<T> g(probs.size(), 0);
  g[label] = -1 / clamp_prob(probs[label]);
  return g;
}

}  // namespace kxr::losses
