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

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/rand.h>

#include <array>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

#include "mft/core.hpp"

namespace mft {

// ---------------------------------------------------------------------------
// SHA-256
// ---------------------------------------------------------------------------

/// Streaming SHA-256 wrapper over OpenSSL EVP.
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("sha256 init failed");
    }
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t n) {
    if (EVP_DigestUpdate(ctx_, data, n) != 1) throw std::runtime_error("sha256 update failed");
  }
  void update(std::string_view data) { update(data.data(), data.size()); }

  std::array<unsigned char, 32> finish() {
    std::array<unsigned char, 32> out{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, out.data(), &len) != 1 || len != 32) {
      throw std::runtime_error("sha256 final failed");
    }
    return out;
  }

  std::string finish_hex() {
    auto d = finish();
    return to_hex(d.data(), d.size());
  }

  void reset() {
    if (EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("sha256 reset failed");
    }
  }

  static std::string hex(std::string_view data) {
    Sha256 h;
    h.update(data);
    return h.finish_hex();
  }

 private:
  EVP_MD_CTX* ctx_;
};

// ---------------------------------------------------------------------------
// HMAC-SHA256
// ---------------------------------------------------------------------------

inline std::string hmac_sha256(std::string_view key, std::string_view data) {
  EVP_PKEY* pkey = EVP_PKEY_new_raw_private_key(
      EVP_PKEY_HMAC, nullptr, reinterpret_cast<const unsigned char*>(key.data()), key.size());
  if (!pkey) throw std::runtime_error("hmac key creation failed");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char mac[64];
  size_t mac_len = sizeof(mac);
  bool ok = ctx && EVP_DigestSignInit(ctx, nullptr, EVP_sha256(), nullptr, pkey) == 1 &&
            EVP_DigestSignUpdate(ctx, data.data(), data.size()) == 1 &&
            EVP_DigestSignFinal(ctx, mac, &mac_len) == 1;
  EVP_MD_CTX_free(ctx);
  EVP_PKEY_free(pkey);
  if (!ok) throw std::runtime_error("hmac computation failed");
  return std::string(reinterpret_cast<char*>(mac), mac_len);
}

inline std::string hmac_sha256_hex(std::string_view key, std::string_view data) {
  return to_hex(hmac_sha256(key, data));
}

/// Constant-time equality for MAC comparison.
inline bool ct_equal(std::string_view a, std::string_view b) {
  if (a.size() != b.size()) return false;
  return CRYPTO_memcmp(a.data(), b.data(), a.size()) == 0;
}

// ---------------------------------------------------------------------------
// Random
// ---------------------------------------------------------------------------

inline std::string rand_bytes(size_t n) {
  std::string out(n, '\0');
  if (RAND_bytes(reinterpret_cast<unsigned char*>(out.data()), static_cast<int>(n)) != 1) {
    throw std::runtime_error("RAND_bytes failed");
  }
  return out;
}

/// 128-bit random id rendered as 32 lowercase hex chars.
inline std::string rand_id() { return to_hex(rand_bytes(16)); }

// ---------------------------------------------------------------------------
// AES-256-GCM sealing (credential store)
// ---------------------------------------------------------------------------

constexpr size_t kGcmNonceLen = 12;
constexpr size_t kGcmTagLen = 16;

/// Seal plaintext with AES-256-GCM. Output layout: nonce || ciphertext || tag.
inline Result<std::string> aes_gcm_seal(std::string_view key32, std::string_view plaintext) {
  if (key32.size() != 32) return make_error("WrongMasterKey", "seal key must be 32 bytes");
  std::string nonce = rand_bytes(kGcmNonceLen);
  std::string out = nonce;
  out.resize(kGcmNonceLen + plaintext.size() + kGcmTagLen);

  EVP_CIPHER_CTX* ctx = EVP_CIPHER_CTX_new();
  int len = 0;
  bool ok =
      ctx && EVP_EncryptInit_ex(ctx, EVP_aes_256_gcm(), nullptr, nullptr, nullptr) == 1 &&
      EVP_CIPHER_CTX_ctrl(ctx, EVP_CTRL_GCM_SET_IVLEN, kGcmNonceLen, nullptr) == 1 &&
      EVP_EncryptInit_ex(ctx, nullptr, nullptr,
                         reinterpret_cast<const unsigned char*>(key32.data()),
                         reinterpret_cast<const unsigned char*>(nonce.data())) == 1 &&
      EVP_EncryptUpdate(ctx, reinterpret_cast<unsigned char*>(out.data()) + kGcmNonceLen, &len,
                        reinterpret_cast<const unsigned char*>(plaintext.data()),
                        static_cast<int>(plaintext.size())) == 1;
  int fin_len = 0;
  ok = ok && EVP_EncryptFinal_ex(ctx, reinterpret_cast<unsigned char*>(out.data()) +
                                          kGcmNonceLen + len,
                                 &fin_len) == 1 &&
       EVP_CIPHER_CTX_ctrl(ctx, EVP_CTRL_GCM_GET_TAG, kGcmTagLen,
                           out.data() + kGcmNonceLen + plaintext.size()) == 1;
  EVP_CIPHER_CTX_free(ctx);
  if (!ok) return make_error("SealFailed", "AES-GCM encryption failed");
  return out;
}

/// Open a sealed blob; authentication failure means the wrong key or a
/// tampered payload.
inline Result<std::string> aes_gcm_open(std::string_view key32, std::string_view sealed) {
  if (key32.size() != 32) return make_error("WrongMasterKey", "open key must be 32 bytes");
  if (sealed.size() < kGcmNonceLen + kGcmTagLen) {
    return make_error("CorruptStore", "sealed blob too short");
  }
  std::string_view nonce = sealed.substr(0, kGcmNonceLen);
  std::string_view ct = sealed.substr(kGcmNonceLen, sealed.size() - kGcmNonceLen - kGcmTagLen);
  std::string_view tag = sealed.substr(sealed.size() - kGcmTagLen);

  std::string out(ct.size(), '\0');
  EVP_CIPHER_CTX* ctx = EVP_CIPHER_CTX_new();
  int len = 0;
  bool ok =
      ctx && EVP_DecryptInit_ex(ctx, EVP_aes_256_gcm(), nullptr, nullptr, nullptr) == 1 &&
      EVP_CIPHER_CTX_ctrl(ctx, EVP_CTRL_GCM_SET_IVLEN, kGcmNonceLen, nullptr) == 1 &&
      EVP_DecryptInit_ex(ctx, nullptr, nullptr,
                         reinterpret_cast<const unsigned char*>(key32.data()),
                         reinterpret_cast<const unsigned char*>(nonce.data())) == 1 &&
      EVP_DecryptUpdate(ctx, reinterpret_cast<unsigned char*>(out.data()), &len,
                        reinterpret_cast<const unsigned char*>(ct.data()),
                        static_cast<int>(ct.size())) == 1 &&
      EVP_CIPHER_CTX_ctrl(ctx, EVP_CTRL_GCM_SET_TAG, kGcmTagLen,
                          const_cast<char*>(tag.data())) == 1;
  int fin_len = 0;
  ok = ok && EVP_DecryptFinal_ex(ctx, reinterpret_cast<unsigned char*>(out.data()) + len,
                                 &fin_len) == 1;
  EVP_CIPHER_CTX_free(ctx);
  if (!ok) return make_error("WrongMasterKey", "GCM authentication failed");
  out.resize(static_cast<size_t>(len) + static_cast<size_t>(fin_len));
  return out;
}

}  // namespace mft
