#include "ddaunet/trainer.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>

#include "ddaunet/inference.hpp"
#include "ddaunet/metrics.hpp"

namespace ddaunet {

void TrainConfig::validate() const {
  network.validate();
  loss.validate();
  sampler.validate();
  if (epochs < 1 || steps_per_epoch < 1) throw ConfigError("epochs and steps_per_epoch must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (split_id < 1 || split_id > 3) throw ConfigError("split_id must be 1, 2 or 3");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (!(optimizer.lr > 0)) throw ConfigError("learning rate must be positive");
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["network"] = nlohmann::json::parse(network.to_json());
  j["loss"] = nlohmann::json::parse(loss.to_json());
  j["sampler"] = nlohmann::json::parse(sampler.to_json());
  j["optimizer"] = {{"lr", optimizer.lr},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"eps", optimizer.eps}};
  j["epochs"] = epochs;
  j["steps_per_epoch"] = steps_per_epoch;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["split_id"] = split_id;
  j["workers"] = workers;
  j["augment"] = augment;
  j["verbose"] = verbose;
  j["bn_refresh"] = bn_refresh;
  j["stop_train_dsc"] = stop_train_dsc;
  j["stop_val_dsc"] = stop_val_dsc;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config json: ") + e.what());
  }
  TrainConfig cfg;
  if (j.contains("network")) cfg.network = NetworkConfig::from_json(j.at("network").dump());
  if (j.contains("loss")) cfg.loss = LossConfig::from_json(j.at("loss").dump());
  if (j.contains("sampler")) cfg.sampler = SamplerConfig::from_json(j.at("sampler").dump());
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    cfg.optimizer.lr = o.value("lr", cfg.optimizer.lr);
    cfg.optimizer.beta1 = o.value("beta1", cfg.optimizer.beta1);
    cfg.optimizer.beta2 = o.value("beta2", cfg.optimizer.beta2);
    cfg.optimizer.eps = o.value("eps", cfg.optimizer.eps);
  }
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.steps_per_epoch = j.value("steps_per_epoch", cfg.steps_per_epoch);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.split_id = j.value("split_id", cfg.split_id);
  cfg.workers = j.value("workers", cfg.workers);
  cfg.augment = j.value("augment", cfg.augment);
  cfg.verbose = j.value("verbose", cfg.verbose);
  cfg.bn_refresh = j.value("bn_refresh", cfg.bn_refresh);
  cfg.stop_train_dsc = j.value("stop_train_dsc", cfg.stop_train_dsc);
  cfg.stop_val_dsc = j.value("stop_val_dsc", cfg.stop_val_dsc);
  cfg.validate();
  return cfg;
}

void TrainLog::save_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write train log " + path.string());
  out << "step,epoch,loss,val_dsc\n";
  char buf[64];
  for (const TrainLogEntry& e : entries) {
    std::snprintf(buf, sizeof(buf), "%.9g", e.loss);
    out << e.step << "," << e.epoch << "," << buf << ",";
    if (e.val_dsc) {
      std::snprintf(buf, sizeof(buf), "%.9g", *e.val_dsc);
      out << buf;
    }
    out << "\n";
  }
}

SplitAssignment assign_split(const Manifest& manifest, int split_id) {
  if (split_id < 1 || split_id > 3) throw ConfigError("split_id must be 1, 2 or 3");
  SplitAssignment a;
  std::vector<const ManifestCase*> pool;
  int64_t n_train = 0;
  for (const ManifestCase& c : manifest.cases) {
    if (c.split == "test") {
      a.test.push_back(&c);
    } else {
      pool.push_back(&c);
      if (c.split == "train") ++n_train;
    }
  }
  if (pool.empty()) throw ParameterError("manifest has no train/val cases");
  Rng rng(mix_seed(0x5EEDull, static_cast<uint64_t>(split_id)));
  for (size_t i = pool.size() - 1; i > 0; --i)
    std::swap(pool[i], pool[rng.next_below(i + 1)]);
  for (size_t i = 0; i < pool.size(); ++i)
    (static_cast<int64_t>(i) < n_train ? a.train : a.val).push_back(pool[i]);
  return a;
}

namespace {

class Adam {
 public:
  Adam(Network& net, OptimConfig cfg) : cfg_(cfg) {
    for (const auto& p : net.params()) {
      m_.emplace_back(p.value->v.size(), 0.f);
      v_.emplace_back(p.value->v.size(), 0.f);
    }
  }

  void step(Network& net) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const auto& params = net.params();
    for (size_t pi = 0; pi < params.size(); ++pi) {
      float* w = params[pi].value->v.data();
      const float* g = params[pi].grad->v.data();
      float* m = m_[pi].data();
      float* v = v_[pi].data();
      const size_t n = params[pi].value->v.size();
      for (size_t i = 0; i < n; ++i) {
        m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
        v[i] = static_cast<float>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        w[i] -= static_cast<float>(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

 private:
  OptimConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

double evaluate_prepared_dsc(Network& net, const PreparedCase& cs) {
  VolumeGrid prob = infer_volume(net, cs.normalized);
  BinaryMask pred = largest_component(binarize(prob, 0.5));
  return dice_coefficient(pred, cs.gtv);
}

// One whole-volume training-mode forward; only batchnorm running statistics
// change. Dims are padded up to multiples of 4 like the inference path.
void bn_refresh_forward(Network& net, const VolumeGrid& normalized) {
  const Dims3& d = normalized.dims;
  auto pad4 = [](int64_t v) { return (v + 3) / 4 * 4; };
  Tensor x(1, 1, pad4(d.nz), pad4(d.ny), pad4(d.nx));
  for (int64_t k = 0; k < d.nz; ++k)
    for (int64_t j = 0; j < d.ny; ++j)
      std::copy_n(normalized.voxels.data() + (k * d.ny + j) * d.nx, d.nx,
                  x.v.data() + (k * x.y + j) * x.x);
  net.forward(x, /*training=*/true);
}

}  // namespace

double evaluate_mean_dsc(Network& net, const std::vector<const ManifestCase*>& cases,
                         const std::filesystem::path& data_root) {
  if (cases.empty()) throw ParameterError("no cases to evaluate");
  double sum = 0;
  for (const ManifestCase* mc : cases) {
    VolumeGrid vol = load_volume(data_root / mc->volume_path);
    BinaryMask gtv = load_mask(data_root / mc->gtv_path);
    VolumeGrid prob = infer_volume(net, normalize_hu_window(vol));
    BinaryMask pred = largest_component(binarize(prob, 0.5));
    sum += dice_coefficient(pred, gtv);
  }
  return sum / static_cast<double>(cases.size());
}

TrainResult train(const TrainConfig& cfg, const Manifest& manifest,
                  const std::filesystem::path& data_root,
                  const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);

  SplitAssignment split = assign_split(manifest, cfg.split_id);
  if (split.train.empty() || split.val.empty())
    throw ParameterError("manifest must provide non-empty train and validation splits");

  SamplerConfig sampler = cfg.sampler;
  sampler.seed = mix_seed(cfg.seed, 0xA5A5ull);
  Network net(cfg.network, mix_seed(cfg.seed, 0x1717ull));
  Adam adam(net, cfg.optimizer);

  // Cache prepared validation/train cases once; they are reused every epoch.
  auto train_loader = manifest_loader(split.train, data_root);
  std::vector<std::shared_ptr<const PreparedCase>> val_cases;
  for (size_t i = 0; i < split.val.size(); ++i) {
    auto loader = manifest_loader({split.val[i]}, data_root);
    val_cases.push_back(loader(0));
  }
  std::vector<std::shared_ptr<const PreparedCase>> refresh_cases;
  if (cfg.bn_refresh)
    for (size_t i = 0; i < std::min<size_t>(split.train.size(), 8); ++i)
      refresh_cases.push_back(train_loader(static_cast<int64_t>(i)));

  BatchStream stream(train_loader, static_cast<int64_t>(split.train.size()), sampler,
                     cfg.batch_size, cfg.steps_per_epoch * cfg.batch_size, cfg.workers,
                     cfg.augment);

  TrainResult result;
  result.best_checkpoint = out_dir / "best.ckpt";
  result.final_checkpoint = out_dir / "final.ckpt";
  result.best_val_dsc = -1;

  const auto [px, py, pz] = sampler.patch_size;
  const int64_t plane = px * py * pz;
  const auto t0 = std::chrono::steady_clock::now();
  int64_t step = 0;
  bool stop = false;

  for (int64_t epoch = 1; epoch <= cfg.epochs && !stop; ++epoch) {
    stream.begin_epoch(epoch);
    for (int64_t s = 0; s < cfg.steps_per_epoch; ++s) {
      std::optional<Batch> batch = stream.next();
      if (!batch) break;
      const int64_t bs = static_cast<int64_t>(batch->patches.size());

      Tensor input(bs, 1, pz, py, px);
      for (int64_t i = 0; i < bs; ++i)
        std::copy(batch->patches[static_cast<size_t>(i)].input.begin(),
                  batch->patches[static_cast<size_t>(i)].input.end(), input.chan(i, 0));

      const Tensor& probs = net.forward(input, /*training=*/true);
      Tensor grad(bs, 2, pz, py, px);
      double loss = 0;
      const double voxvol = batch->patches[0].spacing.x * batch->patches[0].spacing.y *
                            batch->patches[0].spacing.z;
      for (int64_t i = 0; i < bs; ++i) {
        const PatchSample& p = batch->patches[static_cast<size_t>(i)];
        loss += combined_loss(cfg.loss, probs.chan(i, 1), p.label.data(), p.sdf.data(), plane,
                              voxvol, grad.chan(i, 1));
      }
      loss /= static_cast<double>(bs);
      const float inv_bs = 1.f / static_cast<float>(bs);
      for (float& g : grad.v) g *= inv_bs;

      ++step;
      TrainLogEntry entry;
      entry.step = step;
      entry.epoch = epoch;
      entry.loss = loss;
      entry.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

      if (!std::isfinite(loss)) {
        result.log.entries.push_back(entry);
        result.log.save_csv(out_dir / "trainlog.csv");
        throw DivergenceError("non-finite loss at step " + std::to_string(step));
      }

      net.backward(grad);
      adam.step(net);
      net.zero_grad();
      result.log.entries.push_back(entry);
    }

    if (!refresh_cases.empty()) {
      net.begin_bn_reestimate();
      for (const auto& cs : refresh_cases) bn_refresh_forward(net, cs->normalized);
      net.end_bn_reestimate();
    }

    // Per-epoch validation DSC through the regular inference + metrics path.
    double val_dsc = 0;
    for (const auto& cs : val_cases) val_dsc += evaluate_prepared_dsc(net, *cs);
    val_dsc /= static_cast<double>(val_cases.size());
    if (!result.log.entries.empty()) result.log.entries.back().val_dsc = val_dsc;
    if (val_dsc > result.best_val_dsc) {
      result.best_val_dsc = val_dsc;
      save_checkpoint(net, result.best_checkpoint);
    }
    if (cfg.stop_val_dsc > 0 && val_dsc >= cfg.stop_val_dsc) stop = true;
    if (cfg.stop_train_dsc > 0) {
      const double train_dsc = evaluate_mean_dsc(net, split.train, data_root);
      result.final_train_dsc = train_dsc;
      if (train_dsc >= cfg.stop_train_dsc) stop = true;
    }
    if (cfg.verbose) {
      std::fprintf(stderr, "epoch %lld/%lld step %lld loss %.4f val_dsc %.4f",
                   static_cast<long long>(epoch), static_cast<long long>(cfg.epochs),
                   static_cast<long long>(step),
                   result.log.entries.empty() ? 0.0 : result.log.entries.back().loss, val_dsc);
      if (cfg.stop_train_dsc > 0) std::fprintf(stderr, " train_dsc %.4f", result.final_train_dsc);
      std::fprintf(stderr, "\n");
      std::fflush(stderr);
    }
  }

  result.steps_run = step;
  save_checkpoint(net, result.final_checkpoint);
  if (result.best_val_dsc < 0) save_checkpoint(net, result.best_checkpoint);
  result.log.save_csv(out_dir / "trainlog.csv");
  return result;
}

}  // namespace ddaunet
