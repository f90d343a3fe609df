#include "ddaunet/volume.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ddaunet {

namespace {

bool finite_positive(double v) { return std::isfinite(v) && v > 0; }

void check_geometry(const Dims3& dims, const Vec3& spacing) {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0)
    throw ParameterError("volume dims must be positive");
  if (!finite_positive(spacing.x) || !finite_positive(spacing.y) ||
      !finite_positive(spacing.z))
    throw ParameterError("voxel spacing must be strictly positive and finite");
}

// Shortest round-trip decimal for a double ("1 1 3" instead of "1.000000").
std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_vec(const Vec3& v) {
  return format_double(v.x) + " " + format_double(v.y) + " " + format_double(v.z);
}

struct Header {
  Dims3 dims;
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  std::string element_type;
  std::streampos payload_start = 0;
};

Header parse_header(std::istream& in, const std::string& path) {
  Header h;
  bool saw_ndims = false, saw_dims = false, saw_type = false, saw_local = false;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(path + ": malformed header line '" + line + "'");
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t");
      size_t b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key == "NDims") {
      if (value != "3") throw FormatError(path + ": NDims must be 3, got " + value);
      saw_ndims = true;
    } else if (key == "DimSize") {
      std::istringstream vs(value);
      if (!(vs >> h.dims.nx >> h.dims.ny >> h.dims.nz))
        throw FormatError(path + ": bad DimSize '" + value + "'");
      saw_dims = true;
    } else if (key == "ElementSpacing") {
      std::istringstream vs(value);
      if (!(vs >> h.spacing.x >> h.spacing.y >> h.spacing.z))
        throw FormatError(path + ": bad ElementSpacing '" + value + "'");
    } else if (key == "Offset") {
      std::istringstream vs(value);
      if (!(vs >> h.origin.x >> h.origin.y >> h.origin.z))
        throw FormatError(path + ": bad Offset '" + value + "'");
    } else if (key == "ElementType") {
      h.element_type = value;
      saw_type = true;
    } else if (key == "ElementDataFile") {
      if (value != "LOCAL")
        throw FormatError(path + ": only ElementDataFile = LOCAL is supported");
      saw_local = true;
      break;  // payload starts right after this line
    } else {
      throw FormatError(path + ": unknown header key '" + key + "'");
    }
  }
  if (!saw_ndims || !saw_dims || !saw_type || !saw_local)
    throw FormatError(path + ": incomplete header");
  if (h.element_type != "MET_SHORT" && h.element_type != "MET_FLOAT" &&
      h.element_type != "MET_UCHAR")
    throw FormatError(path + ": unsupported ElementType " + h.element_type);
  if (h.dims.nx <= 0 || h.dims.ny <= 0 || h.dims.nz <= 0)
    throw FormatError(path + ": non-positive DimSize");
  if (!finite_positive(h.spacing.x) || !finite_positive(h.spacing.y) ||
      !finite_positive(h.spacing.z))
    throw FormatError(path + ": non-positive ElementSpacing");
  h.payload_start = in.tellg();
  return h;
}

size_t element_size(const std::string& t) {
  if (t == "MET_SHORT") return 2;
  if (t == "MET_FLOAT") return 4;
  return 1;  // MET_UCHAR
}

std::vector<float> read_payload(std::istream& in, const Header& h, const std::string& path) {
  const int64_t n = h.dims.count();
  const size_t esz = element_size(h.element_type);
  std::vector<char> raw(static_cast<size_t>(n) * esz);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw TruncationError(path + ": payload shorter than DimSize*elementsize");
  // Reject trailing garbage as well; a size mismatch either way means the
  // header does not describe the payload.
  char extra;
  if (in.read(&extra, 1), in.gcount() != 0)
    throw TruncationError(path + ": payload longer than DimSize*elementsize");

  std::vector<float> out(static_cast<size_t>(n));
  if (h.element_type == "MET_FLOAT") {
    std::memcpy(out.data(), raw.data(), raw.size());
  } else if (h.element_type == "MET_SHORT") {
    for (int64_t i = 0; i < n; ++i) {
      int16_t v;
      std::memcpy(&v, raw.data() + i * 2, 2);
      out[static_cast<size_t>(i)] = static_cast<float>(v);
    }
  } else {
    for (int64_t i = 0; i < n; ++i)
      out[static_cast<size_t>(i)] = static_cast<float>(static_cast<uint8_t>(raw[static_cast<size_t>(i)]));
  }
  return out;
}

}  // namespace

void VolumeGrid::validate() const {
  check_geometry(dims, spacing);
  if (static_cast<int64_t>(voxels.size()) != dims.count())
    throw ParameterError("voxel payload length does not match dims");
}

int64_t BinaryMask::foreground_count() const {
  int64_t c = 0;
  for (uint8_t v : voxels) c += v;
  return c;
}

void BinaryMask::validate() const {
  check_geometry(dims, spacing);
  if (static_cast<int64_t>(voxels.size()) != dims.count())
    throw ParameterError("mask payload length does not match dims");
  for (uint8_t v : voxels)
    if (v > 1) throw LabelError("mask voxel outside {0,1}");
}

VolumeGrid make_volume(Dims3 dims, Vec3 spacing, Vec3 origin, float fill) {
  check_geometry(dims, spacing);
  VolumeGrid g;
  g.dims = dims;
  g.spacing = spacing;
  g.origin = origin;
  g.voxels.assign(static_cast<size_t>(dims.count()), fill);
  return g;
}

BinaryMask make_mask(Dims3 dims, Vec3 spacing, Vec3 origin, uint8_t fill) {
  check_geometry(dims, spacing);
  if (fill > 1) throw LabelError("mask fill outside {0,1}");
  BinaryMask m;
  m.dims = dims;
  m.spacing = spacing;
  m.origin = origin;
  m.voxels.assign(static_cast<size_t>(dims.count()), fill);
  return m;
}

VolumeGrid load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Header h = parse_header(in, path.string());
  VolumeGrid g;
  g.dims = h.dims;
  g.spacing = h.spacing;
  g.origin = h.origin;
  g.voxels = read_payload(in, h, path.string());
  return g;
}

BinaryMask load_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Header h = parse_header(in, path.string());
  std::vector<float> raw = read_payload(in, h, path.string());
  BinaryMask m;
  m.dims = h.dims;
  m.spacing = h.spacing;
  m.origin = h.origin;
  m.voxels.resize(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] != 0.f && raw[i] != 1.f)
      throw LabelError(path.string() + ": mask value outside {0,1}");
    m.voxels[i] = static_cast<uint8_t>(raw[i]);
  }
  return m;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& header,
                const char* payload, size_t payload_bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payload, static_cast<std::streamsize>(payload_bytes));
  if (!out) throw IoError("write failed for " + path.string());
}

std::string make_header(const Dims3& dims, const Vec3& spacing, const Vec3& origin,
                        const std::string& element_type) {
  std::ostringstream os;
  os << "NDims = 3\n";
  os << "DimSize = " << dims.nx << " " << dims.ny << " " << dims.nz << "\n";
  os << "ElementSpacing = " << format_vec(spacing) << "\n";
  os << "Offset = " << format_vec(origin) << "\n";
  os << "ElementType = " << element_type << "\n";
  os << "ElementDataFile = LOCAL\n";
  return os.str();
}

}  // namespace

void save_volume(const VolumeGrid& grid, const std::filesystem::path& path) {
  grid.validate();
  std::string header = make_header(grid.dims, grid.spacing, grid.origin, "MET_FLOAT");
  write_file(path, header, reinterpret_cast<const char*>(grid.voxels.data()),
             grid.voxels.size() * sizeof(float));
}

void save_mask(const BinaryMask& mask, const std::filesystem::path& path) {
  mask.validate();
  std::string header = make_header(mask.dims, mask.spacing, mask.origin, "MET_UCHAR");
  write_file(path, header, reinterpret_cast<const char*>(mask.voxels.data()),
             mask.voxels.size());
}

namespace {

Dims3 resampled_dims(const Dims3& dims, const Vec3& in_s, const Vec3& out_s) {
  auto axis = [](int64_t n, double si, double so) {
    int64_t m = static_cast<int64_t>(std::llround(static_cast<double>(n) * si / so));
    return std::max<int64_t>(1, m);
  };
  return Dims3{axis(dims.nx, in_s.x, out_s.x), axis(dims.ny, in_s.y, out_s.y),
               axis(dims.nz, in_s.z, out_s.z)};
}

// Continuous input-index coordinate of output sample j (edge-aligned grids).
inline double sample_coord(int64_t j, double s_in, double s_out) {
  return (-0.5 * s_in + (static_cast<double>(j) + 0.5) * s_out) / s_in;
}

}  // namespace

VolumeGrid resample_volume(const VolumeGrid& grid, Vec3 target) {
  grid.validate();
  if (!finite_positive(target.x) || !finite_positive(target.y) || !finite_positive(target.z))
    throw ParameterError("target spacing must be strictly positive");
  Dims3 od = resampled_dims(grid.dims, grid.spacing, target);
  VolumeGrid out = make_volume(od, target, grid.origin);
  const Dims3& id = grid.dims;
  auto clampi = [](int64_t v, int64_t hi) { return std::clamp<int64_t>(v, 0, hi); };
  for (int64_t k = 0; k < od.nz; ++k) {
    double zc = sample_coord(k, grid.spacing.z, target.z);
    int64_t k0 = clampi(static_cast<int64_t>(std::floor(zc)), id.nz - 1);
    int64_t k1 = clampi(k0 + 1, id.nz - 1);
    double fz = std::clamp(zc - static_cast<double>(k0), 0.0, 1.0);
    for (int64_t j = 0; j < od.ny; ++j) {
      double yc = sample_coord(j, grid.spacing.y, target.y);
      int64_t j0 = clampi(static_cast<int64_t>(std::floor(yc)), id.ny - 1);
      int64_t j1 = clampi(j0 + 1, id.ny - 1);
      double fy = std::clamp(yc - static_cast<double>(j0), 0.0, 1.0);
      for (int64_t i = 0; i < od.nx; ++i) {
        double xc = sample_coord(i, grid.spacing.x, target.x);
        int64_t i0 = clampi(static_cast<int64_t>(std::floor(xc)), id.nx - 1);
        int64_t i1 = clampi(i0 + 1, id.nx - 1);
        double fx = std::clamp(xc - static_cast<double>(i0), 0.0, 1.0);
        double c00 = grid.at(i0, j0, k0) * (1 - fx) + grid.at(i1, j0, k0) * fx;
        double c10 = grid.at(i0, j1, k0) * (1 - fx) + grid.at(i1, j1, k0) * fx;
        double c01 = grid.at(i0, j0, k1) * (1 - fx) + grid.at(i1, j0, k1) * fx;
        double c11 = grid.at(i0, j1, k1) * (1 - fx) + grid.at(i1, j1, k1) * fx;
        double c0 = c00 * (1 - fy) + c10 * fy;
        double c1 = c01 * (1 - fy) + c11 * fy;
        out.at(i, j, k) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
      }
    }
  }
  return out;
}

BinaryMask resample_mask(const BinaryMask& mask, Vec3 target) {
  mask.validate();
  if (!finite_positive(target.x) || !finite_positive(target.y) || !finite_positive(target.z))
    throw ParameterError("target spacing must be strictly positive");
  Dims3 od = resampled_dims(mask.dims, mask.spacing, target);
  BinaryMask out = make_mask(od, target, mask.origin);
  const Dims3& id = mask.dims;
  auto nearest = [](double c, int64_t hi) {
    return std::clamp<int64_t>(static_cast<int64_t>(std::llround(c)), 0, hi);
  };
  for (int64_t k = 0; k < od.nz; ++k) {
    int64_t ks = nearest(sample_coord(k, mask.spacing.z, target.z), id.nz - 1);
    for (int64_t j = 0; j < od.ny; ++j) {
      int64_t js = nearest(sample_coord(j, mask.spacing.y, target.y), id.ny - 1);
      for (int64_t i = 0; i < od.nx; ++i) {
        int64_t is = nearest(sample_coord(i, mask.spacing.x, target.x), id.nx - 1);
        out.at(i, j, k) = mask.at(is, js, ks);
      }
    }
  }
  return out;
}

VolumeGrid normalize_hu_window(const VolumeGrid& grid) {
  grid.validate();
  VolumeGrid out = grid;
  const float range = kHuWindowHi - kHuWindowLo;
  for (float& v : out.voxels)
    v = (std::clamp(v, kHuWindowLo, kHuWindowHi) - kHuWindowLo) / range;
  return out;
}

}  // namespace ddaunet
