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

#include <chrono>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace mft {

// ---------------------------------------------------------------------------
// Errors and results
// ---------------------------------------------------------------------------

/// Structured error carried through every fallible operation. `code` is a
/// stable machine string (e.g. "PathEscapesRoot"); `retryable` tells the
/// caller whether trying again can ever help.
struct Error {
  std::string code;
  std::string message;
  bool retryable = false;
};

inline Error make_error(std::string code, std::string message, bool retryable = false) {
  return Error{std::move(code), std::move(message), retryable};
}

template <typename T>
class Result {
 public:
  Result(T value) : inner_(std::move(value)) {}  // NOLINT: implicit by design
  Result(Error err) : inner_(std::move(err)) {}  // NOLINT

  bool ok() const { return std::holds_alternative<T>(inner_); }
  explicit operator bool() const { return ok(); }

  const T& value() const& { return std::get<T>(inner_); }
  T& value() & { return std::get<T>(inner_); }
  T&& take() { return std::move(std::get<T>(inner_)); }

  const Error& error() const { return std::get<Error>(inner_); }

 private:
  std::variant<T, Error> inner_;
};

/// Result for operations with no payload.
class Status {
 public:
  Status() = default;
  Status(Error err) : err_(std::move(err)) {}  // NOLINT

  bool ok() const { return !err_.has_value(); }
  explicit operator bool() const { return ok(); }
  const Error& error() const { return *err_; }

 private:
  std::optional<Error> err_;
};

inline Status ok_status() { return Status{}; }

// ---------------------------------------------------------------------------
// String helpers
// ---------------------------------------------------------------------------

template <typename... Parts>
std::string strcat(Parts&&... parts) {
  std::ostringstream oss;
  (oss << ... << std::forward<Parts>(parts));
  return oss.str();
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(s.substr(start));
      break;
    }
    out.emplace_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline bool starts_with(std::string_view s, std::string_view prefix) {
  return s.size() >= prefix.size() && s.substr(0, prefix.size()) == prefix;
}

// ---------------------------------------------------------------------------
// Hex / base64
// ---------------------------------------------------------------------------

inline std::string to_hex(const unsigned char* data, size_t n) {
  static const char* kDigits = "0123456789abcdef";
  std::string out;
  out.reserve(n * 2);
  for (size_t i = 0; i < n; ++i) {
    out.push_back(kDigits[data[i] >> 4]);
    out.push_back(kDigits[data[i] & 0x0f]);
  }
  return out;
}

inline std::string to_hex(std::string_view data) {
  return to_hex(reinterpret_cast<const unsigned char*>(data.data()), data.size());
}

namespace detail {

inline std::string b64_encode_impl(std::string_view in, const char* alphabet, bool pad) {
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  size_t i = 0;
  while (i + 3 <= in.size()) {
    uint32_t v = (static_cast<unsigned char>(in[i]) << 16) |
                 (static_cast<unsigned char>(in[i + 1]) << 8) |
                 static_cast<unsigned char>(in[i + 2]);
    out.push_back(alphabet[(v >> 18) & 0x3f]);
    out.push_back(alphabet[(v >> 12) & 0x3f]);
    out.push_back(alphabet[(v >> 6) & 0x3f]);
    out.push_back(alphabet[v & 0x3f]);
    i += 3;
  }
  size_t rem = in.size() - i;
  if (rem == 1) {
    uint32_t v = static_cast<unsigned char>(in[i]) << 16;
    out.push_back(alphabet[(v >> 18) & 0x3f]);
    out.push_back(alphabet[(v >> 12) & 0x3f]);
    if (pad) out.append("==");
  } else if (rem == 2) {
    uint32_t v = (static_cast<unsigned char>(in[i]) << 16) |
                 (static_cast<unsigned char>(in[i + 1]) << 8);
    out.push_back(alphabet[(v >> 18) & 0x3f]);
    out.push_back(alphabet[(v >> 12) & 0x3f]);
    out.push_back(alphabet[(v >> 6) & 0x3f]);
    if (pad) out.push_back('=');
  }
  return out;
}

inline int b64_decode_char(char c, bool url) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (url) {
    if (c == '-') return 62;
    if (c == '_') return 63;
  } else {
    if (c == '+') return 62;
    if (c == '/') return 63;
  }
  return -1;
}

inline std::optional<std::string> b64_decode_impl(std::string_view in, bool url) {
  while (!in.empty() && in.back() == '=') in.remove_suffix(1);
  if (in.size() % 4 == 1) return std::nullopt;
  std::string out;
  out.reserve(in.size() * 3 / 4);
  uint32_t acc = 0;
  int bits = 0;
  for (char c : in) {
    int v = b64_decode_char(c, url);
    if (v < 0) return std::nullopt;
    acc = (acc << 6) | static_cast<uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((acc >> bits) & 0xff));
    }
  }
  // Canonical-form check: leftover bits in the final symbol must be zero,
  // otherwise two distinct encodings would decode to the same bytes.
  if (bits > 0 && (acc & ((1u << bits) - 1)) != 0) return std::nullopt;
  return out;
}

}  // namespace detail

/// Standard base64 with padding (used by TUS Upload-Metadata values).
inline std::string b64_encode(std::string_view in) {
  return detail::b64_encode_impl(
      in, "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/", true);
}

inline std::optional<std::string> b64_decode(std::string_view in) {
  return detail::b64_decode_impl(in, false);
}

/// URL-safe base64 without padding (used by the scoped-token wire form).
inline std::string b64url_encode(std::string_view in) {
  return detail::b64_encode_impl(
      in, "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_", false);
}

inline std::optional<std::string> b64url_decode(std::string_view in) {
  return detail::b64_decode_impl(in, true);
}

// ---------------------------------------------------------------------------
// Paths
// ---------------------------------------------------------------------------

/// Normalize a storage-relative path: "/"-separated, no empty, "." or ".."
/// segments, no leading slash in the canonical form. Control characters are
/// rejected because paths travel inside newline-delimited token canonicals.
inline Result<std::string> normalize_path(std::string_view raw) {
  for (char c : raw) {
    if (c == '\0' || c == '\n' || c == '\r') {
      return make_error("EmptyPath", "path contains control characters");
    }
  }
  std::vector<std::string> keep;
  for (auto& seg : split(raw, '/')) {
    if (seg.empty() || seg == ".") continue;
    if (seg == "..") {
      return make_error("PathEscapesRoot", strcat("path contains a parent segment: ", raw));
    }
    keep.push_back(seg);
  }
  if (keep.empty()) return make_error("EmptyPath", "path has no segments");
  std::string out;
  for (size_t i = 0; i < keep.size(); ++i) {
    if (i) out.push_back('/');
    out += keep[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Time
// ---------------------------------------------------------------------------

inline int64_t unix_seconds() {
  return std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

inline int64_t unix_millis() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

inline int64_t steady_millis() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

inline std::string iso8601_utc(int64_t unix_s) {
  time_t t = static_cast<time_t>(unix_s);
  struct tm tm_utc;
  gmtime_r(&t, &tm_utc);
  char buf[32];
  strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

}  // namespace mft
