#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "doctest.h"
#include "moemeta/error.hpp"
#include "moemeta/rng.hpp"

namespace testing {

// Kind of the moemeta::Error thrown by fn, or nullopt-like sentinel when none.
inline int error_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const moemeta::Error& e) {
    return static_cast<int>(e.kind());
  }
  return -1;
}

inline std::string error_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const moemeta::Error& e) {
    return e.what();
  }
  return {};
}

#define CHECK_ERROR_KIND(expr, kind) CHECK(::testing::error_kind([&] { (void)(expr); }) == static_cast<int>(kind))

inline std::vector<double> random_vector(std::size_t n, moemeta::Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

// Central differences of f at x, one coordinate at a time.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double plus = f(x);
    x[i] = saved - h;
    const double minus = f(x);
    x[i] = saved;
    g[i] = (plus - minus) / (2 * h);
  }
  return g;
}

inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("moemeta_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace testing
