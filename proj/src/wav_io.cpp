#include "scatterbench/wav_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace scatterbench {
namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  const auto n = static_cast<std::uint32_t>(w.size());
  const std::uint32_t data_bytes = n * 4;
  const auto rate = static_cast<std::uint32_t>(std::lround(w.sample_rate()));
  os.write("RIFF", 4);
  put_u32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  put_u32(os, 16);
  put_u16(os, kFormatFloat);
  put_u16(os, 1);
  put_u32(os, rate);
  put_u32(os, rate * 4);
  put_u16(os, 4);
  put_u16(os, 32);
  os.write("data", 4);
  put_u32(os, data_bytes);
  std::vector<unsigned char> payload(data_bytes);
  for (std::uint32_t i = 0; i < n; ++i) {
    const float f = static_cast<float>(w[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    payload[4 * i + 0] = static_cast<unsigned char>(bits);
    payload[4 * i + 1] = static_cast<unsigned char>(bits >> 8);
    payload[4 * i + 2] = static_cast<unsigned char>(bits >> 16);
    payload[4 * i + 3] = static_cast<unsigned char>(bits >> 24);
  }
  os.write(reinterpret_cast<const char*>(payload.data()), data_bytes);
  if (!os) throw IoError("write failed: " + path.string());
}

namespace {

struct Header {
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint16_t bits = 0;
  std::uint32_t rate = 0;
  std::streamoff data_offset = -1;
  std::size_t data_len = 0;
};

Header parse_header(std::istream& is, const std::string& where) {
  unsigned char riff[12];
  if (!is.read(reinterpret_cast<char*>(riff), 12) || std::memcmp(riff, "RIFF", 4) != 0 ||
      std::memcmp(riff + 8, "WAVE", 4) != 0) {
    throw FormatError("not a RIFF/WAVE file" + where);
  }
  is.seekg(0, std::ios::end);
  const std::streamoff file_size = is.tellg();
  Header h;
  std::streamoff pos = 12;
  while (pos + 8 <= file_size) {
    is.seekg(pos);
    unsigned char chunk[8];
    if (!is.read(reinterpret_cast<char*>(chunk), 8)) break;
    const std::uint32_t len = get_u32(chunk + 4);
    const std::streamoff body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      unsigned char fmt[40] = {};
      if (len < 16 || body + len > file_size) throw FormatError("truncated fmt chunk" + where);
      is.read(reinterpret_cast<char*>(fmt), std::min<std::uint32_t>(len, 40));
      h.format = get_u16(fmt);
      h.channels = get_u16(fmt + 2);
      h.rate = get_u32(fmt + 4);
      h.bits = get_u16(fmt + 14);
      if (h.format == kFormatExtensible && len >= 26) h.format = get_u16(fmt + 24);
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      h.data_offset = body;
      h.data_len = static_cast<std::size_t>(std::min<std::streamoff>(len, file_size - body));
    }
    pos = body + len + (len & 1u);
  }
  if (h.channels == 0 || h.rate == 0) throw FormatError("missing fmt chunk" + where);
  if (h.data_offset < 0) throw FormatError("missing data chunk" + where);
  if (!((h.format == kFormatPcm && (h.bits == 16 || h.bits == 24 || h.bits == 32)) ||
        (h.format == kFormatFloat && (h.bits == 32 || h.bits == 64)))) {
    throw FormatError("unsupported sample format" + where);
  }
  return h;
}

}  // namespace

WavInfo read_wav_info(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  const Header h = parse_header(is, " (" + path.string() + ")");
  WavInfo info;
  info.sample_rate = h.rate;
  info.channels = h.channels;
  info.frames = h.data_len / (static_cast<std::size_t>(h.bits / 8) * h.channels);
  return info;
}

Waveform read_wav(const std::filesystem::path& path, int channel) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  const std::string where = " (" + path.string() + ")";
  const Header h = parse_header(is, where);
  if (channel < 0 || channel >= h.channels) {
    throw UsageError("channel " + std::to_string(channel) + " not present" + where);
  }
  const std::size_t width = h.bits / 8;
  const std::size_t frame = width * h.channels;
  const std::size_t frames = h.data_len / frame;
  std::vector<unsigned char> bytes(frames * frame);
  is.clear();
  is.seekg(h.data_offset);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw FormatError("truncated data chunk" + where);
  }
  std::vector<double> out(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    const unsigned char* s = bytes.data() + i * frame + static_cast<std::size_t>(channel) * width;
    double v = 0.0;
    if (h.format == kFormatFloat && h.bits == 32) {
      float f;
      std::memcpy(&f, s, 4);
      v = f;
    } else if (h.format == kFormatFloat) {
      double d;
      std::memcpy(&d, s, 8);
      v = d;
    } else if (h.bits == 16) {
      v = static_cast<std::int16_t>(get_u16(s)) / 32768.0;
    } else if (h.bits == 24) {
      std::int32_t x = s[0] | (s[1] << 8) | (s[2] << 16);
      if (x & 0x800000) x |= ~0xFFFFFF;
      v = x / 8388608.0;
    } else {
      v = static_cast<std::int32_t>(get_u32(s)) / 2147483648.0;
    }
    out[i] = v;
  }
  return Waveform(std::move(out), static_cast<double>(h.rate));
}

}  // namespace scatterbench
