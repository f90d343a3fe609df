#include "ddaunet/sampler.hpp"

#include <json.hpp>

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "ddaunet/errors.hpp"

namespace ddaunet {

void SamplerConfig::validate() const {
  for (int64_t p : patch_size)
    if (p <= 0 || p % 4 != 0)
      throw ConfigError("patch dims must be positive and divisible by 4");
  if (tumor_fraction < 0 || tumor_fraction > 1)
    throw ConfigError("tumor_fraction must lie in [0,1]");
  if (noise_sigma_max < 0) throw ConfigError("noise_sigma_max must be >= 0");
}

std::string SamplerConfig::to_json() const {
  nlohmann::json j;
  j["patch_size"] = patch_size;
  j["tumor_fraction"] = tumor_fraction;
  j["noise_sigma_max"] = noise_sigma_max;
  j["seed"] = seed;
  return j.dump();
}

SamplerConfig SamplerConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad sampler config json: ") + e.what());
  }
  SamplerConfig cfg;
  if (j.contains("patch_size")) {
    auto a = j.at("patch_size");
    cfg.patch_size = {a.at(0).get<int64_t>(), a.at(1).get<int64_t>(), a.at(2).get<int64_t>()};
  }
  cfg.tumor_fraction = j.value("tumor_fraction", cfg.tumor_fraction);
  cfg.noise_sigma_max = j.value("noise_sigma_max", cfg.noise_sigma_max);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

PreparedCase prepare_case(const VolumeGrid& raw, const BinaryMask& gtv,
                          const std::string& scan_id) {
  raw.validate();
  gtv.validate();
  if (!gtv.same_geometry(raw.dims, raw.spacing, raw.origin))
    throw ShapeError("gtv geometry differs from volume geometry");
  PreparedCase cs;
  cs.scan_id = scan_id;
  cs.normalized = normalize_hu_window(raw);
  cs.gtv = gtv;
  cs.sdf = signed_distance_map(gtv);
  for (int64_t i = 0; i < raw.dims.count(); ++i) {
    if (gtv.voxels[static_cast<size_t>(i)]) cs.gtv_voxels.push_back(i);
    if (raw.voxels[static_cast<size_t>(i)] > -500.f) cs.body_voxels.push_back(i);
  }
  return cs;
}

PreparedCase prepare_case(const PhantomCase& pc, const std::string& scan_id) {
  return prepare_case(pc.volume, pc.gtv, scan_id);
}

PatchSample sample_patch(const PreparedCase& cs, const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  const Dims3& d = cs.normalized.dims;
  const auto [px, py, pz] = cfg.patch_size;
  const uint64_t draw_id = rng.state();  // identifies this draw in provenance

  const bool tumor_centered = rng.bernoulli(cfg.tumor_fraction);
  if (tumor_centered && cs.gtv_voxels.empty())
    throw SamplingError("tumor-centered patch requested but GTV is empty");
  const std::vector<int64_t>& pool =
      tumor_centered ? cs.gtv_voxels
                     : (cs.body_voxels.empty() ? cs.gtv_voxels : cs.body_voxels);
  if (pool.empty()) throw SamplingError("no candidate center voxels");
  const int64_t flat = pool[rng.next_below(pool.size())];

  const int64_t ci = flat % d.nx;
  const int64_t cj = (flat / d.nx) % d.ny;
  const int64_t ck = flat / (d.nx * d.ny);
  const int64_t x0 = ci - px / 2, y0 = cj - py / 2, z0 = ck - pz / 2;

  PatchSample p;
  p.size = {px, py, pz};
  p.corner = {x0, y0, z0};
  p.spacing = cs.normalized.spacing;
  p.scan_id = cs.scan_id;
  p.seed = draw_id;
  p.input.assign(static_cast<size_t>(px * py * pz), 0.f);
  p.label.assign(static_cast<size_t>(px * py * pz), 0);
  p.sdf.assign(static_cast<size_t>(px * py * pz), 0.0);

  for (int64_t z = 0; z < pz; ++z) {
    const int64_t zi = z0 + z;
    const int64_t zc = std::clamp<int64_t>(zi, 0, d.nz - 1);
    const bool z_in = zi >= 0 && zi < d.nz;
    for (int64_t y = 0; y < py; ++y) {
      const int64_t yi = y0 + y;
      const int64_t yc = std::clamp<int64_t>(yi, 0, d.ny - 1);
      const bool y_in = yi >= 0 && yi < d.ny;
      const int64_t row_out = (z * py + y) * px;
      for (int64_t x = 0; x < px; ++x) {
        const int64_t xi = x0 + x;
        const int64_t xc = std::clamp<int64_t>(xi, 0, d.nx - 1);
        const bool inside = z_in && y_in && xi >= 0 && xi < d.nx;
        if (inside) {
          const int64_t src = (zi * d.ny + yi) * d.nx + xi;
          p.input[static_cast<size_t>(row_out + x)] = cs.normalized.voxels[static_cast<size_t>(src)];
          p.label[static_cast<size_t>(row_out + x)] = cs.gtv.voxels[static_cast<size_t>(src)];
        }
        // The level set is clamped to the nearest in-volume voxel on
        // overhang; outside the scan there is certainly no tumor, so the
        // nearest positive distance is the closest honest value.
        p.sdf[static_cast<size_t>(row_out + x)] =
            cs.sdf.phi[static_cast<size_t>((zc * d.ny + yc) * d.nx + xc)];
      }
    }
  }
  return p;
}

PatchSample sample_patch(const PhantomCase& pc, const SamplerConfig& cfg, Rng& rng) {
  PreparedCase cs = prepare_case(pc, "case");
  return sample_patch(cs, cfg, rng);
}

PatchSample augment_gaussian_noise(PatchSample patch, const SamplerConfig& cfg, Rng& rng) {
  const double sigma = rng.uniform(0.0, cfg.noise_sigma_max);
  for (float& v : patch.input) v += static_cast<float>(rng.normal() * sigma);
  return patch;
}

// --- BatchStream --------------------------------------------------------------

struct BatchStream::Impl {
  CaseLoader loader;
  int64_t n_cases;
  SamplerConfig cfg;
  int64_t batch_size;
  int64_t patches_per_epoch;
  int workers;
  bool augment;

  int64_t epoch = -1;
  int64_t next_plan = 0;      // next plan entry to hand to a worker
  int64_t batches_emitted = 0;

  // multi-worker state
  std::vector<std::thread> threads;
  std::mutex mu;
  std::condition_variable cv_produced, cv_space;
  std::deque<PatchSample> queue;
  int64_t produced = 0;
  bool stopping = false;

  // case cache shared by workers (fetch stage)
  std::mutex cache_mu;
  std::unordered_map<int64_t, std::shared_ptr<const PreparedCase>> cache;

  std::shared_ptr<const PreparedCase> fetch(int64_t case_idx) {
    {
      std::lock_guard<std::mutex> lk(cache_mu);
      auto it = cache.find(case_idx);
      if (it != cache.end()) return it->second;
    }
    std::shared_ptr<const PreparedCase> cs = loader(case_idx);
    std::lock_guard<std::mutex> lk(cache_mu);
    return cache.try_emplace(case_idx, std::move(cs)).first->second;
  }

  PatchSample make_patch(int64_t plan_index) {
    const int64_t case_idx = plan_index % n_cases;
    std::shared_ptr<const PreparedCase> cs = fetch(case_idx);
    Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch), static_cast<uint64_t>(plan_index)));
    PatchSample p = sample_patch(*cs, cfg, rng);
    if (augment) p = augment_gaussian_noise(std::move(p), cfg, rng);
    return p;
  }

  void worker_main() {
    for (;;) {
      int64_t idx;
      {
        std::lock_guard<std::mutex> lk(mu);
        if (stopping || next_plan >= patches_per_epoch) return;
        idx = next_plan++;
      }
      PatchSample p = make_patch(idx);
      std::unique_lock<std::mutex> lk(mu);
      cv_space.wait(lk, [&] { return stopping || queue.size() < static_cast<size_t>(4 * batch_size); });
      if (stopping) return;
      queue.push_back(std::move(p));
      ++produced;
      cv_produced.notify_all();
    }
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lk(mu);
      stopping = true;
    }
    cv_produced.notify_all();
    cv_space.notify_all();
    for (std::thread& t : threads) t.join();
    threads.clear();
    stopping = false;
  }
};

BatchStream::BatchStream(CaseLoader loader, int64_t n_cases, SamplerConfig cfg,
                         int64_t batch_size, int64_t patches_per_epoch, int workers,
                         bool augment)
    : impl_(std::make_unique<Impl>()) {
  if (n_cases <= 0) throw ParameterError("batch stream needs a non-empty manifest");
  if (batch_size < 1) throw ParameterError("batch size must be >= 1");
  if (patches_per_epoch < 1) throw ParameterError("patches_per_epoch must be >= 1");
  cfg.validate();
  impl_->loader = std::move(loader);
  impl_->n_cases = n_cases;
  impl_->cfg = cfg;
  impl_->batch_size = batch_size;
  impl_->patches_per_epoch = patches_per_epoch;
  impl_->workers = std::max(1, workers);
  impl_->augment = augment;
}

BatchStream::~BatchStream() {
  if (!impl_->threads.empty()) impl_->stop_workers();
}

void BatchStream::begin_epoch(int64_t epoch) {
  if (!impl_->threads.empty()) impl_->stop_workers();
  impl_->epoch = epoch;
  impl_->next_plan = 0;
  impl_->batches_emitted = 0;
  impl_->produced = 0;
  impl_->queue.clear();
  if (impl_->workers > 1) {
    for (int w = 0; w < impl_->workers; ++w)
      impl_->threads.emplace_back([this] { impl_->worker_main(); });
  }
}

std::optional<Batch> BatchStream::next() {
  Impl& s = *impl_;
  if (s.epoch < 0) throw ParameterError("begin_epoch must be called before next");
  const int64_t already = s.batches_emitted * s.batch_size;
  if (already >= s.patches_per_epoch) return std::nullopt;
  const int64_t take = std::min(s.batch_size, s.patches_per_epoch - already);

  Batch b;
  b.epoch = s.epoch;
  b.index = s.batches_emitted;
  b.short_batch = take < s.batch_size;
  b.patches.reserve(static_cast<size_t>(take));

  if (s.threads.empty()) {
    for (int64_t i = 0; i < take; ++i) b.patches.push_back(s.make_patch(s.next_plan++));
  } else {
    std::unique_lock<std::mutex> lk(s.mu);
    for (int64_t i = 0; i < take; ++i) {
      s.cv_produced.wait(lk, [&] { return !s.queue.empty(); });
      b.patches.push_back(std::move(s.queue.front()));
      s.queue.pop_front();
      s.cv_space.notify_all();
    }
  }
  ++s.batches_emitted;
  return b;
}

BatchStream::CaseLoader manifest_loader(std::vector<const ManifestCase*> cases,
                                        const std::filesystem::path& root) {
  if (cases.empty()) throw ParameterError("empty case list");
  return [cases = std::move(cases), root](int64_t idx) {
    const ManifestCase* mc = cases.at(static_cast<size_t>(idx));
    VolumeGrid vol = load_volume(root / mc->volume_path);
    BinaryMask gtv = load_mask(root / mc->gtv_path);
    return std::make_shared<const PreparedCase>(prepare_case(vol, gtv, mc->id));
  };
}

BatchStream::CaseLoader manifest_loader(const Manifest& manifest,
                                        const std::filesystem::path& root,
                                        const std::string& split) {
  return manifest_loader(manifest.split(split), root);
}

}  // namespace ddaunet
