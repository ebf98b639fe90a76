#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "morphtrack/tensor.hpp"

namespace morphtrack {

/// Shortest round-trip decimal formatting ("%.17g"); stable across runs.
std::string fmt_double(double v);

/// Writes via temp-file-then-rename so partial outputs never appear.
void write_file_atomic(const std::filesystem::path& path,
                       const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

/// One CSV row; fields are written verbatim (callers format numbers).
std::string csv_row(const std::vector<std::string>& fields);

/// Raw tensor container: magic "MTV1", u32 rank, u32 dims, then row-major
/// little-endian f64 payload.
void write_volume(const std::filesystem::path& path, const Tensor& t);
Tensor read_volume(const std::filesystem::path& path);

/// 8-bit binary PGM (P5) of one B-scan (depth slice), intensities mapped
/// [-1,1] -> [0,255].
std::string pgm_from_slice(const Tensor& vol, int depth_index);

}  // namespace morphtrack
