#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "unvalley/autodiff.hpp"
#include "unvalley/ops.hpp"
#include "unvalley/rng.hpp"

namespace testutil {

using unvalley::Shape;
using unvalley::Tensor;
using unvalley::Var;

// Central-difference gradient check for an op composition reduced to a
// scalar. Every input element is probed.
inline void check_gradients(const std::function<Var(std::vector<Var>&)>& fn,
                            std::vector<Tensor> inputs, double h = 1e-5, double tol = 1e-6) {
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (auto& t : inputs) vars.push_back(Var::leaf(t));
  Var out = fn(vars);
  unvalley::ad::backward(out);

  for (std::size_t vi = 0; vi < vars.size(); ++vi) {
    const Tensor analytic = vars[vi].has_grad() ? vars[vi].grad()
                                                : Tensor::zeros(inputs[vi].shape());
    for (std::int64_t i = 0; i < inputs[vi].numel(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Var> probe;
        probe.reserve(inputs.size());
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          Tensor t = inputs[k];
          if (k == vi) t[i] += delta;
          probe.push_back(Var::constant(std::move(t)));
        }
        return fn(probe).value().item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
      const double diff = std::fabs(numeric - analytic[i]);
      const double scale = std::max({1.0, std::fabs(numeric), std::fabs(analytic[i])});
      INFO("input " << vi << " element " << i << ": analytic " << analytic[i] << " numeric "
                    << numeric);
      REQUIRE(diff <= tol * scale);
    }
  }
}

inline Tensor random_tensor(Shape shape, unvalley::Rng& rng, double stddev = 1.0) {
  return Tensor::gaussian(std::move(shape), rng, stddev);
}

// Unique scratch directory under the build tree, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("unvalley_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
