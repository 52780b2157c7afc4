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

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "mft/core.hpp"

namespace mft {

namespace fs = std::filesystem;

inline Status mkdirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec && !fs::is_directory(dir)) {
    return make_error("Unreachable", strcat("cannot create directory ", dir.string(), ": ",
                                            ec.message()));
  }
  return ok_status();
}

inline std::optional<std::string> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return out;
}

/// Write via a temp sibling then rename, so readers never observe a partial
/// file.
inline Status write_file_atomic(const fs::path& path, std::string_view content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) return make_error("Unreachable", strcat("cannot open ", tmp.string()));
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) return make_error("Unreachable", strcat("write failed for ", tmp.string()));
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) return make_error("Unreachable", strcat("rename failed: ", ec.message()));
  return ok_status();
}

/// Append-mode file handle with explicit durability control.
class AppendFile {
 public:
  AppendFile() = default;
  ~AppendFile() { close(); }
  AppendFile(const AppendFile&) = delete;
  AppendFile& operator=(const AppendFile&) = delete;

  Status open(const fs::path& path, bool truncate) {
    close();
    int flags = O_WRONLY | O_CREAT | O_APPEND | (truncate ? O_TRUNC : 0);
    fd_ = ::open(path.c_str(), flags, 0644);
    if (fd_ < 0) {
      return make_error(errno == ENOSPC ? "StorageFull" : "Unreachable",
                        strcat("open failed for ", path.string(), ": ", strerror(errno)));
    }
    return ok_status();
  }

  Status write(const char* data, size_t n) {
    size_t off = 0;
    while (off < n) {
      ssize_t w = ::write(fd_, data + off, n - off);
      if (w < 0) {
        if (errno == EINTR) continue;
        return make_error(errno == ENOSPC ? "StorageFull" : "Unreachable",
                          strcat("write failed: ", strerror(errno)));
      }
      off += static_cast<size_t>(w);
    }
    return ok_status();
  }

  Status sync() {
    if (fd_ >= 0 && ::fdatasync(fd_) != 0) {
      return make_error("Unreachable", strcat("fdatasync failed: ", strerror(errno)));
    }
    return ok_status();
  }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  bool is_open() const { return fd_ >= 0; }

 private:
  int fd_ = -1;
};

inline uint64_t file_size_or_zero(const fs::path& path) {
  std::error_code ec;
  auto size = fs::file_size(path, ec);
  return ec ? 0 : static_cast<uint64_t>(size);
}

inline bool file_exists(const fs::path& path) {
  std::error_code ec;
  return fs::exists(path, ec);
}

inline void remove_quiet(const fs::path& path) {
  std::error_code ec;
  fs::remove(path, ec);
}

}  // namespace mft
