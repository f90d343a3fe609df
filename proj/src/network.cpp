#include "ddaunet/network.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

namespace ddaunet {

namespace {

int eigen_threads = 0;

struct VariantFlags {
  int dilation;
  bool spa, cha1, cha2;
};

const std::vector<std::pair<std::string, VariantFlags>>& variant_table() {
  static const std::vector<std::pair<std::string, VariantFlags>> table = {
      {"DUnet", {1, false, false, false}},
      {"DDUnet", {2, false, false, false}},
      {"DDAUnet-noChA2", {2, true, false, false}},
      {"DDAUnet-plusChA1-noChA2", {2, true, true, false}},
      {"DDAUnet-noSpA-plusChA1-noChA2", {2, false, true, false}},
      {"DDAUnet", {2, true, false, true}},
  };
  return table;
}

}  // namespace

void set_compute_threads(int n) {
  eigen_threads = n;
  // Parallelism lives at the item/chunk level; individual GEMMs stay
  // single-threaded (faster at conv-sized shapes, layout-independent results).
  Eigen::setNbThreads(1);
#ifdef _OPENMP
  omp_set_num_threads(n);
#endif
}

int compute_threads() { return eigen_threads > 0 ? eigen_threads : 1; }

const std::vector<std::string>& NetworkConfig::variant_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& [name, flags] : variant_table()) v.push_back(name);
    return v;
  }();
  return names;
}

NetworkConfig NetworkConfig::from_variant(const std::string& name) {
  for (const auto& [vname, flags] : variant_table())
    if (vname == name) {
      NetworkConfig cfg;
      cfg.variant = vname;
      cfg.dilation_ddb = flags.dilation;
      cfg.use_spa = flags.spa;
      cfg.use_cha1 = flags.cha1;
      cfg.use_cha2 = flags.cha2;
      return cfg;
    }
  throw ConfigError("unknown network variant '" + name + "'");
}

void NetworkConfig::validate() const {
  if (levels != 3) throw ConfigError("only the three-level architecture is supported");
  if (stem_channels < 1 || sub_ddbs < 1 || growth < 1 || bottleneck < 1)
    throw ConfigError("channel counts and R must be positive");
  if (!(theta > 0.0 && theta <= 1.0)) throw ConfigError("theta must be in (0,1]");
  if (dilation_ddb != 1 && dilation_ddb != 2)
    throw ConfigError("dilation_ddb must be 1 or 2");
  bool found = false;
  for (const auto& [vname, flags] : variant_table())
    if (vname == variant) {
      found = true;
      if (flags.dilation != dilation_ddb || flags.spa != use_spa || flags.cha1 != use_cha1 ||
          flags.cha2 != use_cha2)
        throw ConfigError("variant '" + variant +
                          "' does not match (dilation, SpA, ChA1, ChA2) flags");
    }
  if (!found) throw ConfigError("unknown network variant '" + variant + "'");
}

std::string NetworkConfig::to_json() const {
  nlohmann::json j;
  j["variant"] = variant;
  j["levels"] = levels;
  j["stem_channels"] = stem_channels;
  j["sub_ddbs"] = sub_ddbs;
  j["growth"] = growth;
  j["bottleneck"] = bottleneck;
  j["theta"] = theta;
  j["dilation_ddb"] = dilation_ddb;
  j["use_spa"] = use_spa;
  j["use_cha1"] = use_cha1;
  j["use_cha2"] = use_cha2;
  return j.dump();
}

NetworkConfig NetworkConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad network config json: ") + e.what());
  }
  NetworkConfig cfg;
  if (j.contains("variant")) cfg = from_variant(j.at("variant").get<std::string>());
  cfg.levels = j.value("levels", cfg.levels);
  cfg.stem_channels = j.value("stem_channels", cfg.stem_channels);
  cfg.sub_ddbs = j.value("sub_ddbs", cfg.sub_ddbs);
  cfg.growth = j.value("growth", cfg.growth);
  cfg.bottleneck = j.value("bottleneck", cfg.bottleneck);
  cfg.theta = j.value("theta", cfg.theta);
  cfg.dilation_ddb = j.value("dilation_ddb", cfg.dilation_ddb);
  cfg.use_spa = j.value("use_spa", cfg.use_spa);
  cfg.use_cha1 = j.value("use_cha1", cfg.use_cha1);
  cfg.use_cha2 = j.value("use_cha2", cfg.use_cha2);
  cfg.validate();
  return cfg;
}

std::array<int64_t, 3> receptive_field(const NetworkConfig& cfg) {
  cfg.validate();
  int64_t r = 1, j = 1;
  auto conv = [&](int k, int d) { r += static_cast<int64_t>(k - 1) * d * j; };
  auto ddscab = [&] {
    for (int i = 0; i < cfg.sub_ddbs; ++i) conv(3, cfg.dilation_ddb);
    if (cfg.use_spa) conv(3, 1);
  };
  conv(3, 1);
  conv(3, 1);
  for (int level = 0; level < 2; ++level) {
    ddscab();
    r += j;  // 2x2x2 max-pool
    j *= 2;
  }
  ddscab();
  conv(3, 1);  // bottom post-conv
  for (int level = 0; level < 2; ++level) {
    r += j / 2;  // trilinear x2 upsample taps two input samples
    j /= 2;
    ddscab();
    conv(3, 1);  // up-path post-conv
  }
  return {r, r, r};
}

// --- Builder ----------------------------------------------------------------

template <typename S>
ParamNode<S>* NetworkT<S>::add_param(const std::string& name, TensorT<S> init) {
  auto node = std::make_unique<ParamNode<S>>();
  node->name = name;
  node->out = std::move(init);
  node->grad = TensorT<S>(node->out.n, node->out.c, node->out.z, node->out.y, node->out.x);
  ParamNode<S>* p = node.get();
  nodes_.push_back(std::move(node));
  params_.push_back({name, &p->out, &p->grad});
  return p;
}

template <typename S>
ParamNode<S>* NetworkT<S>::conv_weight(const std::string& name, int64_t co, int64_t ci, int k) {
  TensorT<S> w(co, ci, k, k, k);
  const double fan_in = static_cast<double>(ci) * k * k * k;
  const double stddev = std::sqrt(2.0 / fan_in);
  for (S& v : w.v) v = static_cast<S>(init_rng_.normal() * stddev);
  return add_param(name, std::move(w));
}

template <typename S>
Node<S>* NetworkT<S>::add(std::unique_ptr<Node<S>> node) {
  nodes_.push_back(std::move(node));
  return nodes_.back().get();
}

template <typename S>
Node<S>* NetworkT<S>::conv(const std::string& name, Node<S>* x, int64_t co, int64_t ci, int k,
                           int dil) {
  ParamNode<S>* w = conv_weight(name + ".w", co, ci, k);
  ParamNode<S>* b = add_param(name + ".b", TensorT<S>(co, 1, 1, 1, 1));
  Node<S>* c = add(std::make_unique<Conv3dNode<S>>(x, w, b, k, dil));
  c->name = name;
  return c;
}

template <typename S>
Node<S>* NetworkT<S>::conv_bn_relu(const std::string& name, Node<S>* x, int64_t co, int64_t ci,
                                   int k, int dil) {
  Node<S>* c = conv(name, x, co, ci, k, dil);
  ParamNode<S>* g = add_param(name + ".bn.g", TensorT<S>(co, 1, 1, 1, 1, S(1)));
  ParamNode<S>* b = add_param(name + ".bn.b", TensorT<S>(co, 1, 1, 1, 1));
  auto bn = std::make_unique<BatchNormNode<S>>(c, static_cast<ParamNode<S>*>(g),
                                               static_cast<ParamNode<S>*>(b), co);
  bn->name = name + ".bn";
  bn_nodes_.push_back(bn.get());
  bn_names_.push_back(name + ".bn");
  Node<S>* bnp = add(std::move(bn));
  return add(std::make_unique<ReluNode<S>>(bnp));
}

template <typename S>
Node<S>* NetworkT<S>::dense_block(const std::string& name, Node<S>* x, int64_t c_in,
                                  int64_t* c_out) {
  std::vector<Node<S>*> feats = {x};
  std::vector<int64_t> widths = {c_in};
  int64_t c_acc = c_in;
  for (int i = 0; i < cfg_.sub_ddbs; ++i) {
    Node<S>* in = feats.size() == 1 ? feats[0]
                                    : add(std::make_unique<ConcatNode<S>>(feats));
    std::string sub = name + ".sub" + std::to_string(i + 1);
    Node<S>* bneck = conv_bn_relu(sub + ".bottleneck", in, cfg_.bottleneck, c_acc, 1, 1);
    Node<S>* grown = conv_bn_relu(sub + ".conv", bneck, cfg_.growth, cfg_.bottleneck, 3,
                                  cfg_.dilation_ddb);
    feats.push_back(grown);
    c_acc += cfg_.growth;
  }
  Node<S>* cat = add(std::make_unique<ConcatNode<S>>(feats));
  const int64_t compressed =
      static_cast<int64_t>(std::ceil(cfg_.theta * static_cast<double>(c_acc)));
  Node<S>* y = conv_bn_relu(name + ".compress", cat, compressed, c_acc, 1, 1);
  *c_out = compressed;
  return y;
}

template <typename S>
Node<S>* NetworkT<S>::spatial_gate(const std::string& name, Node<S>* x) {
  Node<S>* mean = add(std::make_unique<ChannelMeanNode<S>>(x));
  Node<S>* max = add(std::make_unique<ChannelMaxNode<S>>(x));
  Node<S>* cat = add(std::make_unique<ConcatNode<S>>(std::vector<Node<S>*>{mean, max}));
  Node<S>* c = conv(name + ".conv", cat, 1, 2, 3, 1);
  Node<S>* gate = add(std::make_unique<SigmoidNode<S>>(c));
  return add(std::make_unique<MulBroadcastNode<S>>(x, gate));
}

template <typename S>
Node<S>* NetworkT<S>::channel_gate(const std::string& name, Node<S>* x, int64_t c) {
  if (c < 2) throw ConfigError("channel attention requires at least 2 channels");
  const int64_t mid = std::max<int64_t>(1, c / 2);  // reduction ratio 2
  Node<S>* pooled = add(std::make_unique<GlobalAvgPoolNode<S>>(x));
  Node<S>* fc1 = conv(name + ".fc1", pooled, mid, c, 1, 1);
  Node<S>* relu = add(std::make_unique<ReluNode<S>>(fc1));
  Node<S>* fc2 = conv(name + ".fc2", relu, c, mid, 1, 1);
  Node<S>* gate = add(std::make_unique<SigmoidNode<S>>(fc2));
  return add(std::make_unique<MulBroadcastNode<S>>(x, gate));
}

template <typename S>
Node<S>* NetworkT<S>::ddscab(const std::string& name, Node<S>* x, int64_t c_in, int64_t* c_out) {
  Node<S>* y = dense_block(name + ".ddb", x, c_in, c_out);
  if (cfg_.use_spa) y = spatial_gate(name + ".spa", y);
  if (cfg_.use_cha1) y = channel_gate(name + ".cha1", y, *c_out);
  return y;
}

template <typename S>
NetworkT<S>::NetworkT(NetworkConfig cfg, uint64_t seed) : cfg_(std::move(cfg)), init_rng_(seed) {
  cfg_.validate();
  if (eigen_threads == 0) {
    const char* env = std::getenv("DDAUNET_THREADS");
    set_compute_threads(env ? std::max(1, std::atoi(env))
                            : static_cast<int>(std::thread::hardware_concurrency()));
  }

  auto in = std::make_unique<InputNode<S>>();
  input_ = in.get();
  nodes_.push_back(std::move(in));

  const int64_t stem = cfg_.stem_channels;
  Node<S>* x = conv_bn_relu("stem.conv1", input_, stem, 1, 3, 1);
  x = conv_bn_relu("stem.conv2", x, stem, stem, 3, 1);

  // down path
  int64_t c = stem;
  std::vector<Node<S>*> skips;
  std::vector<int64_t> skip_widths;
  for (int level = 1; level <= 2; ++level) {
    std::string name = "down" + std::to_string(level);
    int64_t c_ddb = 0;
    x = ddscab(name, x, c, &c_ddb);
    x = conv_bn_relu(name + ".trans", x, c_ddb, c_ddb, 1, 1);
    skips.push_back(x);
    skip_widths.push_back(c_ddb);
    x = add(std::make_unique<MaxPool2Node<S>>(x));
    c = c_ddb;
  }

  // bottom
  {
    int64_t c_ddb = 0;
    x = ddscab("bottom", x, c, &c_ddb);
    x = conv_bn_relu("bottom.post", x, stem, c_ddb, 3, 1);
    c = stem;
  }

  // up path
  for (int level = 2; level >= 1; --level) {
    std::string name = "up" + std::to_string(level);
    Node<S>* skip = skips[static_cast<size_t>(level - 1)];
    int64_t skip_c = skip_widths[static_cast<size_t>(level - 1)];
    if (cfg_.use_cha2) skip = channel_gate(name + ".cha2", skip, skip_c);
    x = add(std::make_unique<Upsample2Node<S>>(x));
    x = add(std::make_unique<ConcatNode<S>>(std::vector<Node<S>*>{x, skip}));
    int64_t c_ddb = 0;
    x = ddscab(name, x, c + skip_c, &c_ddb);
    x = conv_bn_relu(name + ".post", x, stem, c_ddb, 3, 1);
    c = stem;
  }

  x = conv("head", x, 2, stem, 1, 1);  // linear activation
  output_ = add(std::make_unique<SoftmaxChannelNode<S>>(x));
}

template <typename S>
const TensorT<S>& NetworkT<S>::forward(const TensorT<S>& x, bool training) {
  if (x.c != 1) throw ShapeError("network input must have one channel");
  if (x.z % 4 || x.y % 4 || x.x % 4)
    throw ShapeError("network input dims must be divisible by 4");
  input_->set(x);
  for (auto& node : nodes_) node->forward(training);
  return output_->out;
}

template <typename S>
void NetworkT<S>::backward(const TensorT<S>& grad_wrt_probs) {
  if (!grad_wrt_probs.same_shape(output_->out))
    throw ShapeError("gradient shape does not match network output");
  for (auto& node : nodes_) {
    if (dynamic_cast<ParamNode<S>*>(node.get())) continue;  // accumulates across steps
    node->ensure_grad();
    node->grad.fill(S(0));
  }
  output_->grad = grad_wrt_probs;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)->backward();
}

template <typename S>
void NetworkT<S>::zero_grad() {
  for (auto& p : params_) p.grad->fill(S(0));
}

template <typename S>
std::vector<typename NetworkT<S>::BufferRef> NetworkT<S>::buffers() {
  std::vector<BufferRef> out;
  for (size_t i = 0; i < bn_nodes_.size(); ++i) {
    out.push_back({bn_names_[i] + ".running_mean", &bn_nodes_[i]->running_mean});
    out.push_back({bn_names_[i] + ".running_var", &bn_nodes_[i]->running_var});
  }
  return out;
}

template <typename S>
int64_t NetworkT<S>::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.value->numel();
  return n;
}

template <typename S>
void NetworkT<S>::begin_bn_reestimate() {
  for (auto* bn : bn_nodes_) bn->begin_reestimate();
}

template <typename S>
void NetworkT<S>::end_bn_reestimate() {
  for (auto* bn : bn_nodes_) bn->end_reestimate();
}

template class NetworkT<float>;
template class NetworkT<double>;

// --- Checkpoint I/O ----------------------------------------------------------

void save_checkpoint(Network& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  std::ostringstream header;
  header << "DDAUNET_CHECKPOINT 1\n";
  header << "config = " << net.config().to_json() << "\n";
  std::vector<std::pair<std::string, std::vector<float>*>> blobs;
  for (auto& p : net.params()) {
    std::ostringstream shape;
    shape << p.value->n << " " << p.value->c << " " << p.value->z << " " << p.value->y << " "
          << p.value->x;
    header << "param " << p.name << " " << shape.str() << "\n";
    blobs.emplace_back(p.name, &p.value->v);
  }
  for (auto& b : net.buffers()) {
    header << "buffer " << b.name << " " << b.data->size() << "\n";
    blobs.emplace_back(b.name, b.data);
  }
  header << "end_header\n";
  std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (auto& [name, vec] : blobs)
    out.write(reinterpret_cast<const char*>(vec->data()),
              static_cast<std::streamsize>(vec->size() * sizeof(float)));
  if (!out) throw IoError("write failed for " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "DDAUNET_CHECKPOINT 1")
    throw CompatibilityError(path.string() + ": not a checkpoint file");
  if (!std::getline(in, line) || line.rfind("config = ", 0) != 0)
    throw CompatibilityError(path.string() + ": missing config echo");
  NetworkConfig cfg = NetworkConfig::from_json(line.substr(9));

  struct Entry {
    bool is_param;
    std::string name;
    size_t count;
  };
  std::vector<Entry> entries;
  while (std::getline(in, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string kind, name;
    ls >> kind >> name;
    if (kind == "param") {
      int64_t n, c, z, y, x;
      if (!(ls >> n >> c >> z >> y >> x))
        throw CompatibilityError(path.string() + ": bad param line");
      entries.push_back({true, name, static_cast<size_t>(n * c * z * y * x)});
    } else if (kind == "buffer") {
      size_t cnt;
      if (!(ls >> cnt)) throw CompatibilityError(path.string() + ": bad buffer line");
      entries.push_back({false, name, cnt});
    } else {
      throw CompatibilityError(path.string() + ": unexpected header line '" + line + "'");
    }
  }

  Network net(cfg, /*seed=*/0);
  auto params = net.params();
  auto buffers = net.buffers();
  size_t pi = 0, bi = 0;
  for (const Entry& e : entries) {
    float* dst = nullptr;
    size_t expect = 0;
    if (e.is_param) {
      if (pi >= params.size() || params[pi].name != e.name)
        throw CompatibilityError(path.string() + ": parameter list mismatch at " + e.name);
      dst = params[pi].value->v.data();
      expect = params[pi].value->v.size();
      ++pi;
    } else {
      if (bi >= buffers.size() || buffers[bi].name != e.name)
        throw CompatibilityError(path.string() + ": buffer list mismatch at " + e.name);
      dst = buffers[bi].data->data();
      expect = buffers[bi].data->size();
      ++bi;
    }
    if (expect != e.count)
      throw CompatibilityError(path.string() + ": tensor size mismatch for " + e.name);
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(expect * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(expect * sizeof(float)))
      throw CompatibilityError(path.string() + ": truncated payload at " + e.name);
  }
  if (pi != params.size() || bi != buffers.size())
    throw CompatibilityError(path.string() + ": checkpoint is missing tensors");
  return net;
}

Network load_checkpoint(const std::filesystem::path& path, const NetworkConfig& expected) {
  Network net = load_checkpoint(path);
  if (!(net.config() == expected))
    throw CompatibilityError(path.string() + ": checkpoint config does not match expected " +
                             expected.variant);
  return net;
}

}  // namespace ddaunet
