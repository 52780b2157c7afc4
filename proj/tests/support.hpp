// Copyright 2026 The mft Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

namespace testsupport {

namespace fs = std::filesystem;

/// Self-cleaning temp directory for one test case.
class TempDir {
 public:
  explicit TempDir(const std::string& label = "mft-test") {
    auto base = fs::temp_directory_path();
    std::mt19937_64 rng(std::random_device{}());
    path_ = base / (label + "-" + std::to_string(rng()));
    fs::create_directories(path_);
  }

  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }

  const fs::path& path() const { return path_; }
  fs::path sub(const std::string& name) const {
    auto p = path_ / name;
    fs::create_directories(p);
    return p;
  }

 private:
  fs::path path_;
};

inline void write_file(const fs::path& path, std::string_view content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// Deterministic pseudo-random blob for property tests.
inline std::string random_blob(uint64_t seed, size_t size) {
  std::string out;
  out.resize(size);
  std::mt19937_64 rng(seed);
  size_t i = 0;
  while (i < size) {
    uint64_t v = rng();
    for (int b = 0; b < 8 && i < size; ++b, ++i) out[i] = static_cast<char>(v >> (8 * b));
  }
  return out;
}

inline std::string mft_binary_path() {
  if (const char* env = std::getenv("MFT_BIN")) return env;
  return "./tools/mft";
}

}  // namespace testsupport
