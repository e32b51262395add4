#include "mldip/io.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <vector>

namespace mldip::io {

namespace {

// This codebase targets little-endian hosts; the on-disk formats are LE.
static_assert(std::endian::native == std::endian::little || true, "");

struct File {
  std::FILE *f = nullptr;
  explicit File(const std::string &path, const char *mode) : f(std::fopen(path.c_str(), mode)) {
    if (!f) throw FormatError("cannot open " + path);
  }
  ~File() {
    if (f) std::fclose(f);
  }
  File(const File &) = delete;
  File &operator=(const File &) = delete;
};

void write_raw(std::FILE *f, const void *p, std::size_t n) {
  if (std::fwrite(p, 1, n, f) != n) throw FormatError("short write");
}

void read_raw(std::FILE *f, void *p, std::size_t n, const std::string &what) {
  std::size_t got = std::fread(p, 1, n, f);
  if (got != n)
    throw FormatError("truncated file while reading " + what + " (wanted " + std::to_string(n) +
                      " bytes at offset " + std::to_string(std::ftell(f) - long(got)) + ")");
}

template <typename T>
void write_pod(std::FILE *f, T v) {
  write_raw(f, &v, sizeof(T));
}

template <typename T>
T read_pod(std::FILE *f, const std::string &what) {
  T v;
  read_raw(f, &v, sizeof(T), what);
  return v;
}

void write_dvs_header(std::FILE *f, DvsType dtype, std::uint32_t T, const Grid &g) {
  write_raw(f, "DVS1", 4);
  write_pod<std::uint8_t>(f, std::uint8_t(dtype));
  write_pod<std::uint32_t>(f, T);
  write_pod<std::uint32_t>(f, std::uint32_t(g.n1));
  write_pod<std::uint32_t>(f, std::uint32_t(g.n2));
  write_pod<std::uint32_t>(f, std::uint32_t(g.n3));
}

DvsHeader read_dvs_header(std::FILE *f) {
  char magic[4];
  read_raw(f, magic, 4, "DVS magic");
  if (std::memcmp(magic, "DVS1", 4) != 0) throw FormatError("bad DVS magic");
  DvsHeader h;
  auto dt = read_pod<std::uint8_t>(f, "DVS dtype");
  if (dt > 2) throw FormatError("unknown DVS dtype flag " + std::to_string(dt));
  h.dtype = DvsType(dt);
  h.frames = read_pod<std::uint32_t>(f, "DVS T");
  h.n1 = read_pod<std::uint32_t>(f, "DVS n1");
  h.n2 = read_pod<std::uint32_t>(f, "DVS n2");
  h.n3 = read_pod<std::uint32_t>(f, "DVS n3");
  return h;
}

}  // namespace

DvsHeader probe_dvs(const std::string &path) {
  File file(path, "rb");
  return read_dvs_header(file.f);
}

void write_dvs(const ImageSeries &series, const std::string &path) {
  File file(path, "wb");
  write_dvs_header(file.f, DvsType::Complex64, series.frames, series.grid);
  write_raw(file.f, series.data.data(), series.data.size() * sizeof(cfloat));
}

void write_dvs(const LabelSeries &series, const std::string &path) {
  File file(path, "wb");
  write_dvs_header(file.f, DvsType::Int32, series.frames, series.grid);
  write_raw(file.f, series.data.data(), series.data.size() * sizeof(std::int32_t));
}

void write_dvs_float(const std::vector<float> &data, Grid grid, int frames,
                     const std::string &path) {
  if (std::int64_t(data.size()) != grid.voxels() * frames)
    throw ContractError("write_dvs_float: size does not match grid and frame count");
  File file(path, "wb");
  write_dvs_header(file.f, DvsType::Float32, frames, grid);
  write_raw(file.f, data.data(), data.size() * sizeof(float));
}

ImageSeries read_dvs_complex(const std::string &path) {
  File file(path, "rb");
  DvsHeader h = read_dvs_header(file.f);
  if (h.dtype != DvsType::Complex64) throw FormatError(path + ": not a complex64 DVS");
  ImageSeries s(Grid{int(h.n1), int(h.n2), int(h.n3)}, int(h.frames));
  read_raw(file.f, s.data.data(), s.data.size() * sizeof(cfloat), "DVS payload");
  return s;
}

LabelSeries read_dvs_labels(const std::string &path) {
  File file(path, "rb");
  DvsHeader h = read_dvs_header(file.f);
  if (h.dtype != DvsType::Int32) throw FormatError(path + ": not an int32 DVS");
  LabelSeries s(Grid{int(h.n1), int(h.n2), int(h.n3)}, int(h.frames));
  read_raw(file.f, s.data.data(), s.data.size() * sizeof(std::int32_t), "DVS payload");
  return s;
}

std::vector<float> read_dvs_float(const std::string &path, Grid &grid, int &frames) {
  File file(path, "rb");
  DvsHeader h = read_dvs_header(file.f);
  if (h.dtype != DvsType::Float32) throw FormatError(path + ": not a float32 DVS");
  grid = Grid{int(h.n1), int(h.n2), int(h.n3)};
  frames = int(h.frames);
  std::vector<float> data(std::size_t(grid.voxels()) * frames);
  read_raw(file.f, data.data(), data.size() * sizeof(float), "DVS payload");
  return data;
}

void write_kss(const acquisition::KSpaceSeries &ks, const std::string &path) {
  File file(path, "wb");
  write_raw(file.f, "KSS1", 4);
  for (std::uint32_t v : {std::uint32_t(ks.frames), std::uint32_t(ks.n_coils),
                          std::uint32_t(ks.n_ro), std::uint32_t(ks.n1), std::uint32_t(ks.n2),
                          std::uint32_t(ks.n3)})
    write_pod<std::uint32_t>(file.f, v);
  for (int t = 0; t < ks.frames; ++t) {
    for (int j = 0; j < ks.n_ro; ++j) {
      write_pod<std::int32_t>(file.f, ks.pattern.ky_at(t, j));
      write_pod<std::int32_t>(file.f, ks.pattern.kz_at(t, j));
    }
    write_raw(file.f, ks.frame(t), std::size_t(ks.samples_per_frame()) * sizeof(cfloat));
  }
}

acquisition::KSpaceSeries read_kss(const std::string &path) {
  File file(path, "rb");
  char magic[4];
  read_raw(file.f, magic, 4, "KSS magic");
  if (std::memcmp(magic, "KSS1", 4) != 0) throw FormatError(path + ": bad KSS1 magic");
  acquisition::KSpaceSeries ks;
  ks.frames = int(read_pod<std::uint32_t>(file.f, "KSS T"));
  ks.n_coils = int(read_pod<std::uint32_t>(file.f, "KSS n_coils"));
  ks.n_ro = int(read_pod<std::uint32_t>(file.f, "KSS n_ro"));
  ks.n1 = int(read_pod<std::uint32_t>(file.f, "KSS n1"));
  ks.n2 = int(read_pod<std::uint32_t>(file.f, "KSS n2"));
  ks.n3 = int(read_pod<std::uint32_t>(file.f, "KSS n3"));
  ks.pattern.frames = ks.frames;
  ks.pattern.n_ro = ks.n_ro;
  ks.pattern.n2 = ks.n2;
  ks.pattern.n3 = ks.n3;
  ks.pattern.ky.resize(std::size_t(ks.frames) * ks.n_ro);
  ks.pattern.kz.resize(std::size_t(ks.frames) * ks.n_ro);
  ks.allocate();
  for (int t = 0; t < ks.frames; ++t) {
    for (int j = 0; j < ks.n_ro; ++j) {
      ks.pattern.ky[std::size_t(t) * ks.n_ro + j] = read_pod<std::int32_t>(file.f, "KSS ky");
      ks.pattern.kz[std::size_t(t) * ks.n_ro + j] = read_pod<std::int32_t>(file.f, "KSS kz");
    }
    read_raw(file.f, ks.frame(t), std::size_t(ks.samples_per_frame()) * sizeof(cfloat),
             "KSS samples");
  }
  // Recover the gating slot: the slot that is DC in every frame.
  ks.pattern.gating_slot = -1;
  for (int j = 0; j < ks.n_ro; ++j) {
    bool all_dc = true;
    for (int t = 0; t < ks.frames && all_dc; ++t)
      all_dc = ks.pattern.ky_at(t, j) == 0 && ks.pattern.kz_at(t, j) == 0;
    if (all_dc) {
      ks.pattern.gating_slot = j;
      break;
    }
  }
  return ks;
}

void write_coil_maps(const acquisition::CoilMaps &maps, const std::string &path) {
  ImageSeries s(maps.grid, maps.n_coils);
  std::copy(maps.maps.begin(), maps.maps.end(), s.data.begin());
  write_dvs(s, path);
}

acquisition::CoilMaps read_coil_maps(const std::string &path) {
  ImageSeries s = read_dvs_complex(path);
  acquisition::CoilMaps maps(s.grid, s.frames);
  std::copy(s.data.begin(), s.data.end(), maps.maps.begin());
  return maps;
}

// ---- SHA-256 (FIPS 180-4) ----------------------------------------------------

namespace {

constexpr std::uint32_t kK[64] = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
    0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
    0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
    0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
    0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
    0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
    0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
    0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
    0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
    0xc67178f2};

inline std::uint32_t rotr(std::uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

struct Sha256 {
  std::uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                        0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
  std::uint8_t buf[64];
  std::uint64_t total = 0;
  std::size_t fill = 0;

  void block(const std::uint8_t *p) {
    std::uint32_t w[64];
    for (int i = 0; i < 16; ++i)
      w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
             (std::uint32_t(p[4 * i + 2]) << 8) | p[4 * i + 3];
    for (int i = 16; i < 64; ++i) {
      std::uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      std::uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], hh = h[7];
    for (int i = 0; i < 64; ++i) {
      std::uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      std::uint32_t ch = (e & f) ^ (~e & g);
      std::uint32_t t1 = hh + s1 + ch + kK[i] + w[i];
      std::uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      std::uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      std::uint32_t t2 = s0 + maj;
      hh = g; g = f; f = e; e = d + t1; d = c; c = b; b = a; a = t1 + t2;
    }
    h[0] += a; h[1] += b; h[2] += c; h[3] += d;
    h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
  }

  void update(const void *data, std::size_t len) {
    const std::uint8_t *p = static_cast<const std::uint8_t *>(data);
    total += len;
    if (fill) {
      std::size_t take = std::min(len, 64 - fill);
      std::memcpy(buf + fill, p, take);
      fill += take;
      p += take;
      len -= take;
      if (fill == 64) {
        block(buf);
        fill = 0;
      }
    }
    while (len >= 64) {
      block(p);
      p += 64;
      len -= 64;
    }
    if (len) {
      std::memcpy(buf, p, len);
      fill = len;
    }
  }

  std::array<std::uint8_t, 32> finish() {
    std::uint64_t bits = total * 8;
    std::uint8_t pad[72] = {0x80};
    std::size_t padlen = (fill < 56) ? (56 - fill) : (120 - fill);
    update(pad, padlen);
    std::uint8_t lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = std::uint8_t(bits >> (56 - 8 * i));
    update(lenb, 8);
    std::array<std::uint8_t, 32> out;
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 4; ++j) out[4 * i + j] = std::uint8_t(h[i] >> (24 - 8 * j));
    return out;
  }
};

}  // namespace

std::array<std::uint8_t, 32> sha256(const void *data, std::size_t len) {
  Sha256 s;
  s.update(data, len);
  return s.finish();
}

std::string sha256_hex(const void *data, std::size_t len) {
  auto d = sha256(data, len);
  std::string hex(64, '0');
  static const char *digits = "0123456789abcdef";
  for (int i = 0; i < 32; ++i) {
    hex[2 * i] = digits[d[i] >> 4];
    hex[2 * i + 1] = digits[d[i] & 15];
  }
  return hex;
}

std::string sha256_file(const std::string &path) {
  File file(path, "rb");
  Sha256 s;
  std::vector<std::uint8_t> chunk(1 << 16);
  std::size_t got;
  while ((got = std::fread(chunk.data(), 1, chunk.size(), file.f)) > 0) s.update(chunk.data(), got);
  auto d = s.finish();
  std::string hex(64, '0');
  static const char *digits = "0123456789abcdef";
  for (int i = 0; i < 32; ++i) {
    hex[2 * i] = digits[d[i] >> 4];
    hex[2 * i + 1] = digits[d[i] & 15];
  }
  return hex;
}

}  // namespace mldip::io
