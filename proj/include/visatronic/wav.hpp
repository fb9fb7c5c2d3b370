#pragma once

// RIFF/WAVE reading (PCM 16-bit or IEEE float 32-bit, channels averaged) and
// 16-bit mono writing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>

#include "visatronic/error.hpp"
#include "visatronic/meldsp.hpp"
#include "visatronic/tensorfile.hpp"

namespace visatronic {

inline AudioSignal decode_wav(const std::string& bytes, const std::string& what = "wav") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  require(bytes.size() >= 12 && std::memcmp(p, "RIFF", 4) == 0 && std::memcmp(p + 8, "WAVE", 4) == 0,
          ErrorKind::kFormat, what + ": not a RIFF/WAVE file");
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t len = le::get_u32(p + pos + 4);
    const unsigned char* body = p + pos + 8;
    require(pos + 8 + len <= bytes.size(), ErrorKind::kFormat, what + ": truncated chunk");
    if (std::memcmp(p + pos, "fmt ", 4) == 0) {
      require(len >= 16, ErrorKind::kFormat, what + ": short fmt chunk");
      format = static_cast<std::uint16_t>(body[0] | (body[1] << 8));
      channels = static_cast<std::uint16_t>(body[2] | (body[3] << 8));
      rate = le::get_u32(body + 4);
      bits = static_cast<std::uint16_t>(body[14] | (body[15] << 8));
    } else if (std::memcmp(p + pos, "data", 4) == 0) {
      data = body;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }
  require(channels > 0 && data != nullptr, ErrorKind::kFormat, what + ": missing fmt or data chunk");
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  require(pcm16 || f32, ErrorKind::kFormat, what + ": only 16-bit PCM and 32-bit float are supported");
  const std::size_t frame_bytes = static_cast<std::size_t>(channels) * bits / 8;
  const std::size_t n = data_len / frame_bytes;
  AudioSignal a;
  a.sample_rate = static_cast<double>(rate);
  a.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* s = data + i * frame_bytes + c * bits / 8;
      if (pcm16) {
        acc += static_cast<double>(static_cast<std::int16_t>(s[0] | (s[1] << 8))) / 32768.0;
      } else {
        acc += static_cast<double>(std::bit_cast<float>(le::get_u32(s)));
      }
    }
    a.samples[i] = acc / channels;
  }
  return a;
}

inline std::string encode_wav(const AudioSignal& a) {
  std::string out = "RIFF";
  const auto n = static_cast<std::uint32_t>(a.samples.size());
  le::put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  le::put_u32(out, 16);
  out.push_back(1), out.push_back(0);  // PCM
  out.push_back(1), out.push_back(0);  // mono
  const auto rate = static_cast<std::uint32_t>(std::lround(a.sample_rate));
  le::put_u32(out, rate);
  le::put_u32(out, rate * 2);
  out.push_back(2), out.push_back(0);
  out.push_back(16), out.push_back(0);
  out += "data";
  le::put_u32(out, 2 * n);
  for (double s : a.samples) {
    const auto v = static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0, 32767.0 / 32768.0) * 32768.0));
    const auto u = static_cast<std::uint16_t>(v);
    out.push_back(static_cast<char>(u & 0xFF));
    out.push_back(static_cast<char>(u >> 8));
  }
  return out;
}

inline AudioSignal load_wav(const std::filesystem::path& path) { return decode_wav(read_file_bytes(path), path.string()); }
inline void save_wav(const std::filesystem::path& path, const AudioSignal& a) { write_file_bytes(path, encode_wav(a)); }

}  // namespace visatronic
