#include "morphtrack/io.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace morphtrack {

namespace fs = std::filesystem;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("io: cannot open " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("io: short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("io: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

std::string csv_row(const std::vector<std::string>& fields) {
  std::string row;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) row += ',';
    row += fields[i];
  }
  row += '\n';
  return row;
}

void write_volume(const fs::path& path, const Tensor& t) {
  std::string bytes;
  bytes.append("MTV1", 4);
  const Shape& s = t.shape();
  const auto rank = static_cast<std::uint32_t>(s.size());
  bytes.append(reinterpret_cast<const char*>(&rank), sizeof(rank));
  for (int d : s) {
    const auto dim = static_cast<std::uint32_t>(d);
    bytes.append(reinterpret_cast<const char*>(&dim), sizeof(dim));
  }
  const auto data = t.data();
  bytes.append(reinterpret_cast<const char*>(data.data()),
               data.size() * sizeof(double));
  write_file_atomic(path, bytes);
}

Tensor read_volume(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 8 || bytes.compare(0, 4, "MTV1") != 0)
    throw std::runtime_error("io: " + path.string() + " is not a volume file");
  std::size_t off = 4;
  std::uint32_t rank = 0;
  std::memcpy(&rank, bytes.data() + off, sizeof(rank));
  off += sizeof(rank);
  if (rank > 8) throw std::runtime_error("io: implausible volume rank");
  Shape shape(rank);
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t d = 0;
    if (off + sizeof(d) > bytes.size())
      throw std::runtime_error("io: truncated volume header");
    std::memcpy(&d, bytes.data() + off, sizeof(d));
    off += sizeof(d);
    shape[i] = static_cast<int>(d);
    count *= d;
  }
  if (off + count * sizeof(double) != bytes.size())
    throw std::runtime_error("io: volume payload size mismatch in " +
                             path.string());
  std::vector<double> data(count);
  std::memcpy(data.data(), bytes.data() + off, count * sizeof(double));
  return Tensor::from_data(shape, std::move(data));
}

std::string pgm_from_slice(const Tensor& vol, int depth_index) {
  if (vol.rank() != 4 || vol.dim(0) != 1)
    throw std::invalid_argument("pgm: expected a [1,H,W,D] volume");
  const int h = vol.dim(1), w = vol.dim(2), d = vol.dim(3);
  if (depth_index < 0 || depth_index >= d)
    throw std::invalid_argument("pgm: depth index out of range");
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) +
                    "\n255\n";
  const auto v = vol.data();
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double x =
          v[(static_cast<std::size_t>(i) * w + j) * d + depth_index];
      const double mapped = (x + 1.0) * 0.5 * 255.0;
      const double clamped = mapped < 0.0 ? 0.0 : (mapped > 255.0 ? 255.0 : mapped);
      out.push_back(static_cast<char>(
          static_cast<unsigned char>(std::lround(clamped))));
    }
  }
  return out;
}

}  // namespace morphtrack
