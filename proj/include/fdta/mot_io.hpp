#pragma once

// File formats: MOTChallenge text rows, DGRID1 depth-grid binaries, APPR1
// appearance-code binaries, flat key=value configs with sections, and CSV
// outputs. Binary formats are little-endian by definition, written
// byte-by-byte so output is identical on any host.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdta/track_record.hpp"

namespace fdta::io {

using track::TrackRecord;

struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// MOTChallenge text: frame,id,x,y,w,h,conf,-1,-1,-1 (1-based frame/id)

inline std::string format_mot(const std::vector<TrackRecord>& records) {
  std::string out;
  char line[256];
  for (const auto& r : records) {
    std::snprintf(line, sizeof(line), "%lld,%lld,%.4f,%.4f,%.4f,%.4f,%.4f,-1,-1,-1\n",
                  static_cast<long long>(r.frame), static_cast<long long>(r.id), r.box.x,
                  r.box.y, r.box.w, r.box.h, r.confidence);
    out += line;
  }
  return out;
}

inline void write_mot(const std::vector<TrackRecord>& records, const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot open for writing: " + path);
  file << format_mot(records);
}

inline std::vector<TrackRecord> parse_mot(std::istream& in, const std::string& what) {
  std::vector<TrackRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> fields;
    std::stringstream ss(line);
    std::string token;
    while (std::getline(ss, token, ',')) {
      try {
        fields.push_back(std::stod(token));
      } catch (const std::exception&) {
        throw DataError(what + ": bad number at line " + std::to_string(line_no));
      }
    }
    if (fields.size() < 6)
      throw DataError(what + ": expected at least 6 fields at line " + std::to_string(line_no));
    TrackRecord r;
    r.frame = static_cast<std::int64_t>(fields[0]);
    r.id = static_cast<std::int64_t>(fields[1]);
    r.box = geom::Box2D{fields[2], fields[3], fields[4], fields[5]};
    r.confidence = fields.size() > 6 ? fields[6] : 1.0;
    records.push_back(r);
  }
  return records;
}

inline std::vector<TrackRecord> read_mot(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot open: " + path);
  return parse_mot(file, path);
}

// ---------------------------------------------------------------------------
// Little-endian primitives

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(f));
  std::memcpy(&bits, &f, sizeof(bits));
  put_u32(out, bits);
}

inline std::uint32_t get_u32(const std::string& data, std::size_t& off, const std::string& what) {
  if (off + 4 > data.size()) throw DataError(what + ": truncated");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(data[off + i]);
  off += 4;
  return v;
}

inline float get_f32(const std::string& data, std::size_t& off, const std::string& what) {
  const std::uint32_t bits = get_u32(data, off, what);
  float f;
  std::memcpy(&f, &bits, sizeof(f));
  return f;
}

inline std::string read_file(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot open: " + path);
  std::stringstream ss;
  ss << file.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& data) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot open for writing: " + path);
  file.write(data.data(), static_cast<std::streamsize>(data.size()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// DGRID1: magic "DGRID1", u32 rows, u32 cols, row-major f32

inline std::string encode_dgrid(int rows, int cols, const std::vector<double>& values) {
  if (static_cast<std::size_t>(rows) * cols != values.size())
    throw std::invalid_argument("encode_dgrid: size mismatch");
  std::string out = "DGRID1";
  detail::put_u32(out, static_cast<std::uint32_t>(rows));
  detail::put_u32(out, static_cast<std::uint32_t>(cols));
  for (double v : values) detail::put_f32(out, static_cast<float>(v));
  return out;
}

struct DepthGrid {
  int rows = 0, cols = 0;
  std::vector<double> values;
};

inline DepthGrid decode_dgrid(const std::string& data, const std::string& what = "dgrid") {
  if (data.size() < 6 || data.compare(0, 6, "DGRID1") != 0)
    throw DataError(what + ": bad magic");
  std::size_t off = 6;
  DepthGrid grid;
  grid.rows = static_cast<int>(detail::get_u32(data, off, what));
  grid.cols = static_cast<int>(detail::get_u32(data, off, what));
  const std::size_t n = static_cast<std::size_t>(grid.rows) * grid.cols;
  grid.values.reserve(n);
  for (std::size_t i = 0; i < n; ++i) grid.values.push_back(detail::get_f32(data, off, what));
  if (off != data.size()) throw DataError(what + ": trailing bytes");
  return grid;
}

inline void write_dgrid(int rows, int cols, const std::vector<double>& values,
                        const std::string& path) {
  detail::write_file(path, encode_dgrid(rows, cols, values));
}

inline DepthGrid read_dgrid(const std::string& path) {
  return decode_dgrid(detail::read_file(path), path);
}

// ---------------------------------------------------------------------------
// APPR1: magic "APPR1", u32 count, u32 dim, f32 data

inline std::string encode_appearance(const std::vector<std::vector<double>>& codes) {
  std::string out = "APPR1";
  detail::put_u32(out, static_cast<std::uint32_t>(codes.size()));
  detail::put_u32(out, codes.empty() ? 0 : static_cast<std::uint32_t>(codes.front().size()));
  for (const auto& code : codes) {
    if (!codes.empty() && code.size() != codes.front().size())
      throw std::invalid_argument("encode_appearance: ragged codes");
    for (double v : code) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

inline std::vector<std::vector<double>> decode_appearance(const std::string& data,
                                                          const std::string& what = "appr") {
  if (data.size() < 5 || data.compare(0, 5, "APPR1") != 0) throw DataError(what + ": bad magic");
  std::size_t off = 5;
  const std::uint32_t count = detail::get_u32(data, off, what);
  const std::uint32_t dim = detail::get_u32(data, off, what);
  std::vector<std::vector<double>> codes(count, std::vector<double>(dim));
  for (auto& code : codes)
    for (auto& v : code) v = detail::get_f32(data, off, what);
  if (off != data.size()) throw DataError(what + ": trailing bytes");
  return codes;
}

inline void write_appearance(const std::vector<std::vector<double>>& codes,
                             const std::string& path) {
  detail::write_file(path, encode_appearance(codes));
}

inline std::vector<std::vector<double>> read_appearance(const std::string& path) {
  return decode_appearance(detail::read_file(path), path);
}

// ---------------------------------------------------------------------------
// Flat key=value config with [section] headers and # comments

class Config {
 public:
  Config() = default;

  static Config parse(std::istream& in, const std::string& what) {
    Config cfg;
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw DataError(what + ": malformed section at line " + std::to_string(line_no));
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw DataError(what + ": expected key=value at line " + std::to_string(line_no));
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty())
        throw DataError(what + ": empty key at line " + std::to_string(line_no));
      cfg.values_[section.empty() ? key : section + "." + key] = value;
    }
    return cfg;
  }

  static Config load(const std::string& path) {
    std::ifstream file(path);
    if (!file) throw DataError("cannot open: " + path);
    return parse(file, path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw DataError("config: bad number for " + key + ": " + it->second);
    }
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stoll(it->second);
    } catch (const std::exception&) {
      throw DataError("config: bad integer for " + key + ": " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "1" || it->second == "true" || it->second == "on") return true;
    if (it->second == "0" || it->second == "false" || it->second == "off") return false;
    throw DataError("config: bad boolean for " + key + ": " + it->second);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// CSV outputs

inline std::string metrics_csv(const std::vector<std::pair<std::string, double>>& rows) {
  std::string out = "metric,value\n";
  char line[128];
  for (const auto& [name, value] : rows) {
    std::snprintf(line, sizeof(line), "%s,%.6f\n", name.c_str(), value);
    out += line;
  }
  return out;
}

inline std::string histogram_csv(double lo, double bin_width,
                                 const std::vector<std::int64_t>& counts) {
  std::string out = "bin_low,bin_high,count\n";
  char line[128];
  for (std::size_t i = 0; i < counts.size(); ++i) {
    std::snprintf(line, sizeof(line), "%.2f,%.2f,%lld\n", lo + i * bin_width,
                  lo + (i + 1) * bin_width, static_cast<long long>(counts[i]));
    out += line;
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  detail::write_file(path, text);
}

}  // namespace fdta::io
