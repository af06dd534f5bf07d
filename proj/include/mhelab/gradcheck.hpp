#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mhelab/tensor.hpp"

// Central finite-difference verification of the tape gradients, always in
// fp64. The loss builder is re-invoked per probe, so it must be a pure
// function of the parameter values.

namespace mhelab::gradcheck {

struct Options {
  double h = 1e-5;
  double rtol = 1e-3;
  double atol = 1e-6;
  // When > 0, probe at most this many entries per tensor (sampled).
  std::size_t max_entries_per_tensor = 0;
  // When > 0, probe this many entries sampled across ALL tensors instead.
  std::size_t total_samples = 0;
  std::uint64_t seed = 0;
};

struct Result {
  std::string name;
  bool ok = true;
  std::size_t checked = 0;
  double max_abs_diff = 0.0;
  double max_rel_diff = 0.0;
  std::string worst_entry;  // human-readable pointer at the worst probe
};

using LossFn = std::function<Tensor<double>()>;
using NamedParams = std::vector<std::pair<std::string, Tensor<double>>>;

inline std::vector<Result> check(const LossFn& build_loss, const NamedParams& params,
                                 const Options& opt = {}) {
  for (const auto& [name, p] : params)
    if (!p.requires_grad())
      throw ContractError("gradcheck: parameter '" + name + "' does not require gradients");

  // Analytic pass.
  for (const auto& [name, p] : params) const_cast<Tensor<double>&>(p).zero_grad();
  {
    GradTape<double> tape;
    Tensor<double> loss = build_loss();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  // Choose probe entries.
  std::mt19937_64 rng(opt.seed);
  std::vector<std::vector<std::size_t>> probe(params.size());
  if (opt.total_samples > 0) {
    std::size_t total = 0;
    for (const auto& [name, p] : params) total += p.numel();
    std::uniform_int_distribution<std::size_t> dist(0, total - 1);
    for (std::size_t s = 0; s < opt.total_samples; ++s) {
      std::size_t flat = dist(rng);
      for (std::size_t t = 0; t < params.size(); ++t) {
        if (flat < params[t].second.numel()) {
          probe[t].push_back(flat);
          break;
        }
        flat -= params[t].second.numel();
      }
    }
  } else {
    for (std::size_t t = 0; t < params.size(); ++t) {
      const std::size_t n = params[t].second.numel();
      if (opt.max_entries_per_tensor == 0 || n <= opt.max_entries_per_tensor) {
        probe[t].resize(n);
        for (std::size_t i = 0; i < n; ++i) probe[t][i] = i;
      } else {
        std::uniform_int_distribution<std::size_t> dist(0, n - 1);
        for (std::size_t s = 0; s < opt.max_entries_per_tensor; ++s)
          probe[t].push_back(dist(rng));
      }
    }
  }

  auto eval_loss = [&]() -> double {
    Tensor<double> loss = build_loss();  // no active tape: plain forward
    return loss.at(0);
  };

  std::vector<Result> results;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Result res;
    res.name = params[t].first;
    Tensor<double>& p = const_cast<Tensor<double>&>(params[t].second);
    for (std::size_t idx : probe[t]) {
      const double orig = p.data()[idx];
      p.data()[idx] = orig + opt.h;
      const double up = eval_loss();
      p.data()[idx] = orig - opt.h;
      const double down = eval_loss();
      p.data()[idx] = orig;
      const double numeric = (up - down) / (2.0 * opt.h);
      const double exact = analytic[t][idx];
      const double abs_diff = std::abs(numeric - exact);
      const double denom = std::max(std::abs(numeric), std::abs(exact));
      const double rel_diff = denom > 0 ? abs_diff / denom : 0.0;
      ++res.checked;
      if (abs_diff > res.max_abs_diff) res.max_abs_diff = abs_diff;
      if (rel_diff > res.max_rel_diff) res.max_rel_diff = rel_diff;
      if (abs_diff > opt.atol && rel_diff > opt.rtol) {
        res.ok = false;
        if (res.worst_entry.empty() || abs_diff >= res.max_abs_diff)
          res.worst_entry = res.name + "[" + std::to_string(idx) +
                            "]: analytic=" + std::to_string(exact) +
                            " numeric=" + std::to_string(numeric);
      }
    }
    results.push_back(std::move(res));
  }
  return results;
}

inline bool all_ok(const std::vector<Result>& results) {
  for (const auto& r : results)
    if (!r.ok) return false;
  return true;
}

}  // namespace mhelab::gradcheck
