#include "vfa/dataio.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "vfa/error.hpp"

namespace vfa {

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [p, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && p == last;
}

bool parse_int(const std::string& s, std::int64_t& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename U>
void put_le(std::vector<unsigned char>& out, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

template <typename U>
U get_le(const unsigned char* p) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

[[noreturn]] void header_error(const std::filesystem::path& path, int line, const std::string& what) {
  throw FormatError(path.string() + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

std::string to_string(Dtype d) {
  switch (d) {
    case Dtype::F32: return "f32";
    case Dtype::F64: return "f64";
    case Dtype::I32: return "i32";
  }
  return "?";
}

std::size_t dtype_size(Dtype d) { return d == Dtype::F64 ? 8 : 4; }

void Volume::validate() const {
  shape.validate();
  if (channels < 1) throw FormatError("volume channel count must be >= 1");
  if (static_cast<std::int64_t>(values.size()) != numel()) {
    throw DimensionError("volume holds " + std::to_string(values.size()) + " values, expected " +
                         std::to_string(numel()));
  }
}

template <typename T>
Var<T> Volume::to_var() const {
  validate();
  Shape s{channels};
  s.insert(s.end(), shape.extents.begin(), shape.extents.end());
  std::vector<T> v(values.begin(), values.end());
  return Var<T>::from(std::move(s), std::move(v));
}

template <typename T>
Volume Volume::from_var(const Var<T>& v, std::vector<double> spacing, Dtype dtype) {
  if (v.rank() < 2) throw DimensionError("volume tensors need a channel axis and spatial axes");
  Volume out;
  out.channels = v.dim(0);
  out.shape.extents = spatial_shape(v.shape());
  out.shape.spacing = spacing.empty() ? std::vector<double>(out.shape.extents.size(), 1.0) : std::move(spacing);
  out.dtype = dtype;
  out.values.assign(v.data().begin(), v.data().end());
  if (dtype == Dtype::F32) {
    for (auto& x : out.values) x = static_cast<double>(static_cast<float>(x));
  }
  out.validate();
  return out;
}

LabelMap Volume::to_labels() const {
  validate();
  if (channels != 1) throw FormatError("label volumes must have exactly one channel");
  LabelMap m;
  m.extents = shape.extents;
  m.labels.reserve(values.size());
  for (double v : values) {
    if (v != std::floor(v) || v < 0 || v > 2147483647.0) {
      throw FormatError("label volume holds a non-integral or negative value " + fmt17(v));
    }
    m.labels.push_back(static_cast<std::int32_t>(v));
  }
  return m;
}

Volume Volume::from_labels(const LabelMap& labels, std::vector<double> spacing) {
  labels.validate();
  Volume out;
  out.shape.extents = labels.extents;
  out.shape.spacing = spacing.empty() ? std::vector<double>(labels.extents.size(), 1.0) : std::move(spacing);
  out.dtype = Dtype::I32;
  out.values.assign(labels.labels.begin(), labels.labels.end());
  out.validate();
  return out;
}

DisplacementVolume Volume::to_displacement() const {
  validate();
  if (channels != shape.dims()) {
    throw FormatError("transform volumes need one channel per axis: " + std::to_string(channels) + " channels for " +
                      std::to_string(shape.dims()) + " axes");
  }
  DisplacementVolume f;
  f.extents = shape.extents;
  f.u = values;
  return f;
}

Volume Volume::from_displacement(const DisplacementVolume& phi, std::vector<double> spacing, Dtype dtype) {
  phi.validate();
  Volume out;
  out.shape.extents = phi.extents;
  out.shape.spacing = spacing.empty() ? std::vector<double>(phi.extents.size(), 1.0) : std::move(spacing);
  out.channels = phi.dims();
  out.dtype = dtype;
  out.values = phi.u;
  if (dtype == Dtype::F32) {
    for (auto& x : out.values) x = static_cast<double>(static_cast<float>(x));
  }
  out.validate();
  return out;
}

void write_volume(const std::filesystem::path& path, const Volume& v) {
  v.validate();
  if (v.dtype == Dtype::I32) {
    for (double x : v.values) {
      if (x != std::floor(x) || std::abs(x) > 2147483647.0) throw FormatError("i32 volume holds a non-integral value");
    }
  }
  std::ostringstream hdr;
  hdr << "VFAVOL 1\ndims";
  for (auto e : v.shape.extents) hdr << ' ' << e;
  hdr << "\nspacing";
  for (double s : v.shape.spacing) hdr << ' ' << fmt17(s);
  hdr << "\nchannels " << v.channels << "\ndtype " << to_string(v.dtype) << "\nbyteorder little\nend\n";
  std::vector<unsigned char> payload;
  payload.reserve(v.values.size() * dtype_size(v.dtype));
  for (double x : v.values) {
    switch (v.dtype) {
      case Dtype::F32: put_le(payload, static_cast<float>(x)); break;
      case Dtype::F64: put_le(payload, x); break;
      case Dtype::I32: put_le(payload, static_cast<std::int32_t>(x)); break;
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::string h = hdr.str();
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open volume '" + path.string() + "'");
  Volume v;
  bool have_dims = false, have_spacing = false, have_channels = false, have_dtype = false, have_order = false;
  std::string line;
  int lineno = 0;
  if (!std::getline(is, line)) header_error(path, 1, "empty file");
  ++lineno;
  if (trim(line) != "VFAVOL 1") header_error(path, lineno, "expected 'VFAVOL 1', got '" + trim(line) + "'");
  bool ended = false;
  while (std::getline(is, line)) {
    ++lineno;
    const auto tok = split_ws(line);
    if (tok.empty()) header_error(path, lineno, "blank header line");
    const std::string& key = tok[0];
    if (key == "end") {
      ended = true;
      break;
    }
    if (key == "dims") {
      if (tok.size() < 2 || tok.size() > 4) header_error(path, lineno, "dims needs 1 to 3 values");
      for (std::size_t i = 1; i < tok.size(); ++i) {
        std::int64_t n = 0;
        if (!parse_int(tok[i], n)) header_error(path, lineno, "malformed extent '" + tok[i] + "'");
        if (n < 1) header_error(path, lineno, "extent " + tok[i] + " must be >= 1");
        v.shape.extents.push_back(n);
      }
      have_dims = true;
    } else if (key == "spacing") {
      for (std::size_t i = 1; i < tok.size(); ++i) {
        double s = 0;
        if (!parse_double(tok[i], s) || !(s > 0) || !std::isfinite(s)) {
          header_error(path, lineno, "spacing '" + tok[i] + "' must be a positive number");
        }
        v.shape.spacing.push_back(s);
      }
      have_spacing = true;
    } else if (key == "channels") {
      if (tok.size() != 2 || !parse_int(tok[1], v.channels) || v.channels < 1) {
        header_error(path, lineno, "channels needs one positive integer");
      }
      have_channels = true;
    } else if (key == "dtype") {
      if (tok.size() != 2) header_error(path, lineno, "dtype needs one value");
      if (tok[1] == "f32") {
        v.dtype = Dtype::F32;
      } else if (tok[1] == "f64") {
        v.dtype = Dtype::F64;
      } else if (tok[1] == "i32") {
        v.dtype = Dtype::I32;
      } else {
        header_error(path, lineno, "unknown dtype '" + tok[1] + "'");
      }
      have_dtype = true;
    } else if (key == "byteorder") {
      if (tok.size() != 2 || tok[1] != "little") header_error(path, lineno, "only 'byteorder little' is supported");
      have_order = true;
    } else {
      header_error(path, lineno, "unknown header key '" + key + "'");
    }
  }
  if (!ended) header_error(path, lineno, "header not terminated by 'end'");
  if (!have_dims) header_error(path, lineno, "missing 'dims'");
  if (!have_spacing) header_error(path, lineno, "missing 'spacing'");
  if (!have_channels) header_error(path, lineno, "missing 'channels'");
  if (!have_dtype) header_error(path, lineno, "missing 'dtype'");
  if (!have_order) header_error(path, lineno, "missing 'byteorder'");
  if (v.shape.spacing.size() != v.shape.extents.size()) {
    header_error(path, lineno, "spacing has " + std::to_string(v.shape.spacing.size()) + " entries for " +
                                   std::to_string(v.shape.extents.size()) + " axes");
  }
  const std::uint64_t expected = static_cast<std::uint64_t>(v.numel()) * dtype_size(v.dtype);
  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (payload.size() != expected) {
    throw FormatError(path.string() + ": corrupt payload, expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(payload.size()));
  }
  v.values.resize(static_cast<std::size_t>(v.numel()));
  const std::size_t w = dtype_size(v.dtype);
  for (std::size_t i = 0; i < v.values.size(); ++i) {
    const unsigned char* p = payload.data() + i * w;
    switch (v.dtype) {
      case Dtype::F32: v.values[i] = get_le<float>(p); break;
      case Dtype::F64: v.values[i] = get_le<double>(p); break;
      case Dtype::I32: v.values[i] = get_le<std::int32_t>(p); break;
    }
  }
  return v;
}

// ---- keypoints -------------------------------------------------------------

KeypointReadResult read_keypoints(const std::filesystem::path& path, int dims) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open keypoint file '" + path.string() + "'");
  KeypointReadResult r;
  std::string line;
  int lineno = 0;
  std::size_t columns = 0;
  if (dims != 0) columns = static_cast<std::size_t>(2 * dims);
  bool first_content = true;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(t);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (!t.empty() && t.back() == ',') cells.push_back("");
    if (first_content && !cells.empty() && cells[0] == "fx") {
      first_content = false;
      if (columns == 0) columns = cells.size();
      if (cells.size() != columns) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": header has " +
                          std::to_string(cells.size()) + " columns, expected " + std::to_string(columns));
      }
      continue;
    }
    first_content = false;
    if (columns == 0) columns = cells.size();
    if (columns != 4 && columns != 6) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 4 or 6 columns, found " +
                        std::to_string(columns));
    }
    if (cells.size() != columns) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": ragged row with " +
                        std::to_string(cells.size()) + " columns, expected " + std::to_string(columns));
    }
    const std::size_t d = columns / 2;
    for (std::size_t c = 0; c < columns; ++c) {
      double v = 0;
      if (!parse_double(cells[c], v) || !std::isfinite(v)) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": non-numeric value '" + cells[c] +
                          "' in column " + std::to_string(c + 1));
      }
      (c < d ? r.keypoints.fixed : r.keypoints.moving).push_back(v);
    }
  }
  if (columns == 0) columns = dims ? static_cast<std::size_t>(2 * dims) : 6;
  if (columns != 4 && columns != 6) {
    throw FormatError(path.string() + ": expected 4 or 6 columns, found " + std::to_string(columns));
  }
  r.keypoints.dims = static_cast<int>(columns / 2);
  r.keypoints.spacing.assign(static_cast<std::size_t>(r.keypoints.dims), 1.0);
  if (r.keypoints.empty()) r.warnings.push_back(path.string() + ": no keypoint rows");
  return r;
}

void write_keypoints(const std::filesystem::path& path, const KeypointSet& kp) {
  kp.validate();
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  static const char* names[] = {"x", "y", "z"};
  os << "fx";
  for (int a = 1; a < kp.dims; ++a) os << ",f" << names[a];
  for (int a = 0; a < kp.dims; ++a) os << ",m" << names[a];
  os << '\n';
  for (std::size_t p = 0; p < kp.size(); ++p) {
    for (int a = 0; a < kp.dims; ++a) os << (a ? "," : "") << fmt17(kp.fixed[p * kp.dims + a]);
    for (int a = 0; a < kp.dims; ++a) os << ',' << fmt17(kp.moving[p * kp.dims + a]);
    os << '\n';
  }
}

void write_pgm(const std::filesystem::path& path, const std::vector<double>& values, std::int64_t rows,
               std::int64_t cols) {
  if (rows < 1 || cols < 1 || static_cast<std::int64_t>(values.size()) != rows * cols) {
    throw DimensionError("write_pgm: " + std::to_string(values.size()) + " values for a " + std::to_string(rows) +
                         "x" + std::to_string(cols) + " map");
  }
  double hi = 0;
  for (double v : values)
    if (std::isfinite(v)) hi = std::max(hi, v);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << "P5\n" << cols << ' ' << rows << "\n255\n";
  for (double v : values) {
    const double t = hi > 0 && std::isfinite(v) ? std::clamp(v / hi, 0.0, 1.0) : 0.0;
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

// ---- run config ------------------------------------------------------------

ConfigMap parse_run_config(const std::string& text, const std::string& origin) {
  ConfigMap out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
    out[key] = trim(t.substr(eq + 1));
  }
  return out;
}

ConfigMap read_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

template Var<float> Volume::to_var<float>() const;
template Var<double> Volume::to_var<double>() const;
template Volume Volume::from_var<float>(const Var<float>&, std::vector<double>, Dtype);
template Volume Volume::from_var<double>(const Var<double>&, std::vector<double>, Dtype);

}  // namespace vfa
