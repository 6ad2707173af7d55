#pragma once

#include <filesystem>

#include "scatterbench/core.hpp"

namespace scatterbench {

/// Writes a mono RIFF/WAVE file with IEEE float-32 samples. Values are
/// narrowed to float; the sample rate is rounded to the nearest integer Hz.
void write_wav(const std::filesystem::path& path, const Waveform& w);

/// Reads PCM 16/24/32-bit integer or IEEE float 32/64 WAV. Multi-channel
/// files yield the requested channel.
Waveform read_wav(const std::filesystem::path& path, int channel = 0);

struct WavInfo {
  double sample_rate = 0.0;
  int channels = 0;
  std::size_t frames = 0;
  double duration() const { return sample_rate > 0 ? static_cast<double>(frames) / sample_rate : 0.0; }
};

/// Parses only the header chunks.
WavInfo read_wav_info(const std::filesystem::path& path);

}  // namespace scatterbench
