#pragma once

#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>

#include "nxgpt/error.hpp"
#include "nxgpt/params.hpp"

// Fails unless expr throws nxgpt::Error of the given kind.
#define CHECK_ERROR_KIND(expr, expected)                                     \
  do {                                                                       \
    bool thrown_ = false;                                                    \
    try {                                                                    \
      (void)(expr);                                                          \
    } catch (const nxgpt::Error& e_) {                                       \
      thrown_ = true;                                                        \
      CHECK_MESSAGE(e_.kind() == (expected), e_.what());                     \
    }                                                                        \
    CHECK_MESSAGE(thrown_, "no nxgpt::Error from " #expr);                   \
  } while (0)

namespace testing {

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nxgpt_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline bool bitwise_equal(const nxgpt::Mat& a, const nxgpt::Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace testing
