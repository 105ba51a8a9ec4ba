#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "kxr/common.hpp"

#ifndef KXR_SOURCE_DIR
#define KXR_SOURCE_DIR "."
#endif

namespace kxr::testing {

inline std::string repo_path(const std::string& rel) {
  return (std::filesystem::path(KXR_SOURCE_DIR) / rel).string();
}

// Unique scratch directory, removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("kxr-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// Max relative error between an analytic gradient and central differences.
inline double gradient_check(const std::function<double(const std::vector<double>&)>& f,
                             std::vector<double> x, const std::vector<double>& analytic,
                             double h = 1e-5) {
  double worst = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    const double numeric = (fp - fm) / (2 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace kxr::testing
