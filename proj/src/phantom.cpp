#include "ddaunet/phantom.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ddaunet/rng.hpp"

namespace ddaunet {

const std::set<std::string>& phantom_tag_vocabulary() {
  static const std::set<std::string> vocab = {"air_pocket",   "feeding_tube", "junction_tumor",
                                              "large_gtv",    "hiatal_hernia", "dislocated",
                                              "proximal"};
  return vocab;
}

void PhantomSpec::validate() const {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0)
    throw SpecError("phantom dims must be positive");
  if (spacing.x <= 0 || spacing.y <= 0 || spacing.z <= 0)
    throw SpecError("phantom spacing must be positive");
  if (tumor_center_z < 0.1 || tumor_center_z > 0.9)
    throw SpecError("tumor_center_z must lie in [0.1, 0.9]");
  if (!(tumor_length_mm > 0)) throw SpecError("tumor_length_mm must be > 0");
  if (!(esophagus_radius_mm > 0)) throw SpecError("esophagus_radius_mm must be > 0");
  if (!(tumor_radius_mm > esophagus_radius_mm))
    throw SpecError("tumor_radius_mm must exceed esophagus_radius_mm");
  if (curvature_amplitude_mm < 0) throw SpecError("curvature_amplitude_mm must be >= 0");
  if (noise_hu < 0) throw SpecError("noise_hu must be >= 0");
  for (const std::string& t : tags)
    if (!phantom_tag_vocabulary().count(t)) throw SpecError("unknown tag '" + t + "'");
  if (tags.count("air_pocket") != static_cast<size_t>(has_air_pocket ? 1 : 0))
    throw SpecError("air_pocket tag must match has_air_pocket");
  if (tags.count("feeding_tube") != static_cast<size_t>(has_feeding_tube ? 1 : 0))
    throw SpecError("feeding_tube tag must match has_feeding_tube");

  // The tumor must fit inside the volume extent, including its radius around
  // the (curved, possibly dislocated) centerline.
  const double zext = static_cast<double>(dims.nz) * spacing.z;
  const double zc = tumor_center_z * zext;
  if (zc - tumor_length_mm / 2 < 0 || zc + tumor_length_mm / 2 > zext)
    throw SpecError("tumor does not fit inside the volume in z");
  const double xext = static_cast<double>(dims.nx) * spacing.x;
  const double yext = static_cast<double>(dims.ny) * spacing.y;
  const double dislocation =
      tags.count("dislocated") ? palette.dislocation_offset_mm : 0.0;
  const double max_cx = xext / 2 + curvature_amplitude_mm + dislocation + tumor_radius_mm;
  const double min_cx = xext / 2 - curvature_amplitude_mm - tumor_radius_mm;
  const double cy = yext / 2 + 0.12 * yext;
  if (min_cx < 0 || max_cx > xext || cy - tumor_radius_mm < 0 || cy + tumor_radius_mm > yext)
    throw SpecError("tumor does not fit inside the volume in x/y");
}

namespace {

struct Centerline {
  double cx0, cy, amplitude, phase, zext;
  double x(double z) const { return cx0 + amplitude * std::sin(2 * M_PI * z / zext + phase); }
  double y(double) const { return cy; }
};

}  // namespace

PhantomCase generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Dims3& d = spec.dims;
  const Vec3& s = spec.spacing;
  const PhantomPalette& pal = spec.palette;

  VolumeGrid vol = make_volume(d, s, {0, 0, 0}, pal.air_hu);
  BinaryMask gtv = make_mask(d, s, {0, 0, 0});

  const double xext = d.nx * s.x, yext = d.ny * s.y, zext = d.nz * s.z;
  const double cx = xext / 2, cy = yext / 2;
  Rng rng(mix_seed(spec.seed, 0x9a11ull));

  const double dislocation = spec.tags.count("dislocated") ? pal.dislocation_offset_mm : 0.0;
  Centerline line{cx + dislocation, cy + 0.12 * yext, spec.curvature_amplitude_mm,
                  rng.uniform(0, 2 * M_PI), zext};

  const double zc = spec.tumor_center_z * zext;
  const double z_lo = zc - spec.tumor_length_mm / 2, z_hi = zc + spec.tumor_length_mm / 2;
  const double pocket_half =
      spec.tumor_length_mm * pal.air_pocket_length_fraction / 2;
  const float tumor_hu = pal.wall_hu + pal.tumor_contrast_hu;

  // Body ellipse and lungs are per-slice 2D shapes spanning all z.
  const double body_a = 0.42 * xext, body_b = 0.38 * yext;
  const double lung_dx = 0.22 * xext, lung_a = 0.15 * xext, lung_b = 0.24 * yext;

  for (int64_t k = 0; k < d.nz; ++k) {
    const double z = k * s.z;
    const double ex = line.x(z), ey = line.y(z);
    const bool in_tumor_z = z >= z_lo && z <= z_hi;
    const bool in_pocket_z = std::abs(z - zc) <= pocket_half;
    for (int64_t j = 0; j < d.ny; ++j) {
      const double y = j * s.y;
      for (int64_t i = 0; i < d.nx; ++i) {
        const double x = i * s.x;
        float hu = pal.air_hu;
        const double bx = (x - cx) / body_a, by = (y - cy) / body_b;
        if (bx * bx + by * by <= 1.0) {
          hu = pal.body_hu;
          const double lxl = (x - (cx - lung_dx)) / lung_a, lyl = (y - cy) / lung_b;
          const double lxr = (x - (cx + lung_dx)) / lung_a;
          if (lxl * lxl + lyl * lyl <= 1.0 || lxr * lxr + lyl * lyl <= 1.0)
            hu = pal.lung_hu;
          const double rx = x - ex, ry = y - ey;
          const double r = std::sqrt(rx * rx + ry * ry);
          if (in_tumor_z && r <= spec.tumor_radius_mm) {
            hu = tumor_hu;
            gtv.at(i, j, k) = 1;
            if (spec.has_air_pocket && in_pocket_z && r <= pal.air_pocket_radius_mm)
              hu = pal.air_hu;
          } else if (r <= spec.esophagus_radius_mm) {
            hu = pal.wall_hu;
          }
          if (spec.has_feeding_tube && r <= pal.tube_radius_mm) hu = pal.tube_hu;
        }
        vol.at(i, j, k) = hu;
      }
    }
  }

  if (gtv.foreground_count() == 0)
    throw SpecError("generated gtv is empty; tumor misses all voxel centers");

  if (spec.noise_hu > 0) {
    Rng noise(mix_seed(spec.seed, 0x6e015eull));
    for (float& v : vol.voxels)
      v += static_cast<float>(noise.normal() * spec.noise_hu);
  }

  return PhantomCase{std::move(vol), std::move(gtv), spec};
}

// --- Corpus ------------------------------------------------------------------

void CorpusConfig::validate() const {
  if (n < 3) throw ParameterError("corpus needs at least 3 cases");
  if (train_fraction <= 0 || val_fraction <= 0 || test_fraction <= 0)
    throw ParameterError("split fractions must be positive");
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
    throw ParameterError("split fractions must sum to 1");
}

std::string CorpusConfig::to_json() const {
  nlohmann::json j;
  j["n"] = n;
  j["train_fraction"] = train_fraction;
  j["val_fraction"] = val_fraction;
  j["test_fraction"] = test_fraction;
  j["seed"] = seed;
  j["dims"] = {dims.nx, dims.ny, dims.nz};
  j["spacing"] = {spacing.x, spacing.y, spacing.z};
  j["noise_hu"] = noise_hu;
  j["air_pocket_prob"] = air_pocket_prob;
  j["feeding_tube_prob"] = feeding_tube_prob;
  j["junction_prob"] = junction_prob;
  j["proximal_prob"] = proximal_prob;
  j["hernia_prob"] = hernia_prob;
  j["dislocated_prob"] = dislocated_prob;
  j["large_gtv_volume_cc"] = large_gtv_volume_cc;
  j["max_tumor_radius_mm"] = max_tumor_radius_mm;
  return j.dump();
}

CorpusConfig CorpusConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad corpus config json: ") + e.what());
  }
  CorpusConfig cfg;
  cfg.n = j.value("n", cfg.n);
  cfg.train_fraction = j.value("train_fraction", cfg.train_fraction);
  cfg.val_fraction = j.value("val_fraction", cfg.val_fraction);
  cfg.test_fraction = j.value("test_fraction", cfg.test_fraction);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("dims")) {
    auto a = j.at("dims");
    cfg.dims = {a.at(0).get<int64_t>(), a.at(1).get<int64_t>(), a.at(2).get<int64_t>()};
  }
  if (j.contains("spacing")) {
    auto a = j.at("spacing");
    cfg.spacing = {a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>()};
  }
  cfg.noise_hu = j.value("noise_hu", cfg.noise_hu);
  cfg.air_pocket_prob = j.value("air_pocket_prob", cfg.air_pocket_prob);
  cfg.feeding_tube_prob = j.value("feeding_tube_prob", cfg.feeding_tube_prob);
  cfg.junction_prob = j.value("junction_prob", cfg.junction_prob);
  cfg.proximal_prob = j.value("proximal_prob", cfg.proximal_prob);
  cfg.hernia_prob = j.value("hernia_prob", cfg.hernia_prob);
  cfg.dislocated_prob = j.value("dislocated_prob", cfg.dislocated_prob);
  cfg.large_gtv_volume_cc = j.value("large_gtv_volume_cc", cfg.large_gtv_volume_cc);
  cfg.max_tumor_radius_mm = j.value("max_tumor_radius_mm", cfg.max_tumor_radius_mm);
  cfg.validate();
  return cfg;
}

PhantomSpec draw_case_spec(const CorpusConfig& cfg, int64_t case_index) {
  Rng rng(mix_seed(cfg.seed, 0x50ecull, static_cast<uint64_t>(case_index)));
  PhantomSpec spec;
  spec.dims = cfg.dims;
  spec.spacing = cfg.spacing;
  spec.noise_hu = cfg.noise_hu;
  spec.seed = mix_seed(cfg.seed, 0xca5e, static_cast<uint64_t>(case_index));

  const double xext = cfg.dims.nx * cfg.spacing.x;
  const double yext = cfg.dims.ny * cfg.spacing.y;
  const double zext = cfg.dims.nz * cfg.spacing.z;

  spec.esophagus_radius_mm = rng.uniform(3.5, 4.5);
  spec.tumor_radius_mm = spec.esophagus_radius_mm + rng.uniform(2.5, 5.0);
  // Tumor lengths are anatomical (mm), clamped so small test volumes stay
  // usable.
  const double len_lo = std::min(21.0, 0.45 * zext);
  const double len_hi = std::max(len_lo + 1.0, std::min(43.0, 0.6 * zext));
  spec.tumor_length_mm = rng.uniform(len_lo, len_hi);
  spec.tumor_center_z = rng.uniform(0.3, 0.7);

  if (rng.bernoulli(cfg.junction_prob)) {
    spec.tags.insert("junction_tumor");
    spec.tumor_center_z = rng.uniform(0.12, 0.2);
  } else if (rng.bernoulli(cfg.proximal_prob)) {
    spec.tags.insert("proximal");
    spec.tumor_center_z = rng.uniform(0.8, 0.88);
  }
  if (rng.bernoulli(cfg.hernia_prob)) {
    spec.tags.insert("hiatal_hernia");
    spec.tumor_center_z = std::max(0.12, spec.tumor_center_z - 0.08);
    spec.tumor_radius_mm += 1.0;
  }
  // A 10mm lateral dislocation only fits in full-size volumes.
  double dislocation = 0;
  if (xext >= 80 && rng.bernoulli(cfg.dislocated_prob)) {
    spec.tags.insert("dislocated");
    dislocation = spec.palette.dislocation_offset_mm;
  }
  if (rng.bernoulli(cfg.air_pocket_prob)) {
    spec.has_air_pocket = true;
    spec.tags.insert("air_pocket");
  }
  if (rng.bernoulli(cfg.feeding_tube_prob)) {
    spec.has_feeding_tube = true;
    spec.tags.insert("feeding_tube");
  }

  // Cap the geometry so the tumor always fits the volume: the centerline sits
  // at (0.5*xext + dislocation +/- amplitude, 0.62*yext).
  const double r_cap = std::min({0.38 * yext - 0.5, 0.5 * xext - dislocation - 1.5,
                                 cfg.max_tumor_radius_mm});
  spec.tumor_radius_mm = std::min(spec.tumor_radius_mm, r_cap);
  if (spec.tumor_radius_mm <= spec.esophagus_radius_mm + 1.0)
    spec.esophagus_radius_mm = std::max(1.5, spec.tumor_radius_mm - 1.2);
  const double amp_cap =
      std::min(8.0, 0.5 * xext - dislocation - spec.tumor_radius_mm - 0.8);
  spec.curvature_amplitude_mm = rng.uniform(0.0, std::max(0.0, amp_cap));

  // Keep the tumor inside the z extent whatever the tag adjustments did.
  const double half = spec.tumor_length_mm / 2;
  const double lo = std::max(0.1, half / zext + 0.01);
  const double hi = std::min(0.9, 1.0 - half / zext - 0.01);
  spec.tumor_center_z = std::clamp(spec.tumor_center_z, lo, hi);

  const double volume_cc = M_PI * spec.tumor_radius_mm * spec.tumor_radius_mm *
                           spec.tumor_length_mm / 1000.0;
  if (volume_cc > cfg.large_gtv_volume_cc) spec.tags.insert("large_gtv");
  return spec;
}

std::vector<const ManifestCase*> Manifest::split(const std::string& name) const {
  std::vector<const ManifestCase*> out;
  for (const ManifestCase& c : cases)
    if (c.split == name) out.push_back(&c);
  return out;
}

void Manifest::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["seed"] = seed;
  nlohmann::json arr = nlohmann::json::array();
  for (const ManifestCase& c : cases) {
    nlohmann::json e;
    e["id"] = c.id;
    e["volume"] = c.volume_path;
    e["gtv"] = c.gtv_path;
    e["split"] = c.split;
    e["tags"] = c.tags;
    e["seed"] = c.seed;
    arr.push_back(e);
  }
  j["cases"] = arr;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
}

Manifest Manifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad manifest json: " + e.what());
  }
  Manifest m;
  m.seed = j.value("seed", 0ull);
  if (!j.contains("cases")) throw FormatError(path.string() + ": manifest has no cases");
  for (const auto& e : j.at("cases")) {
    ManifestCase c;
    c.id = e.at("id").get<std::string>();
    c.volume_path = e.at("volume").get<std::string>();
    c.gtv_path = e.at("gtv").get<std::string>();
    c.split = e.at("split").get<std::string>();
    c.tags = e.value("tags", std::vector<std::string>{});
    c.seed = e.value("seed", 0ull);
    m.cases.push_back(std::move(c));
  }
  return m;
}

Manifest generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);

  // Split sizes: floor, then hand out remainders by largest fractional part.
  const double fracs[3] = {cfg.train_fraction, cfg.val_fraction, cfg.test_fraction};
  int64_t sizes[3];
  double rema[3];
  int64_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double exact = fracs[i] * static_cast<double>(cfg.n);
    sizes[i] = static_cast<int64_t>(std::floor(exact + 1e-9));
    rema[i] = exact - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  while (assigned < cfg.n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rema[i] > rema[best]) best = i;
    ++sizes[best];
    rema[best] = -1;
    ++assigned;
  }

  std::vector<int64_t> order(static_cast<size_t>(cfg.n));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(mix_seed(cfg.seed, 0x500117ull));
  for (int64_t i = cfg.n - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)],
              order[static_cast<size_t>(shuffle_rng.next_below(static_cast<uint64_t>(i + 1)))]);

  Manifest manifest;
  manifest.seed = cfg.seed;
  for (int64_t idx = 0; idx < cfg.n; ++idx) {
    const int64_t case_index = order[static_cast<size_t>(idx)];
    const char* split = idx < sizes[0] ? "train" : (idx < sizes[0] + sizes[1] ? "val" : "test");
    PhantomSpec spec = draw_case_spec(cfg, case_index);
    PhantomCase pc = generate_phantom(spec);
    char id[32];
    std::snprintf(id, sizeof(id), "case_%04lld", static_cast<long long>(case_index));
    ManifestCase mc;
    mc.id = id;
    mc.volume_path = std::string(id) + "_vol.mha";
    mc.gtv_path = std::string(id) + "_gtv.mha";
    mc.split = split;
    mc.tags.assign(spec.tags.begin(), spec.tags.end());
    mc.seed = spec.seed;
    save_volume(pc.volume, out_dir / mc.volume_path);
    save_mask(pc.gtv, out_dir / mc.gtv_path);
    manifest.cases.push_back(std::move(mc));
  }
  std::sort(manifest.cases.begin(), manifest.cases.end(),
            [](const ManifestCase& a, const ManifestCase& b) { return a.id < b.id; });
  manifest.save(out_dir / "manifest.json");
  return manifest;
}

}  // namespace ddaunet
