#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "ddaunet/graph.hpp"
#include "ddaunet/rng.hpp"
#include "ddaunet/tensor.hpp"

namespace ddaunet {

// Architecture description. The variant name fully determines the
// (dilation, SpA, ChA1, ChA2) combination; free widths (bottleneck, theta,
// growth, stem) default to the shipped schedule.
struct NetworkConfig {
  int levels = 3;
  int stem_channels = 16;
  int sub_ddbs = 3;  // R
  int growth = 16;
  int bottleneck = 8;  // sub-DDB 1x1x1 bottleneck output channels
  double theta = 0.5;
  int dilation_ddb = 2;
  bool use_spa = true;
  bool use_cha1 = false;
  bool use_cha2 = true;
  std::string variant = "DDAUnet";

  static NetworkConfig from_variant(const std::string& name);
  static const std::vector<std::string>& variant_names();
  void validate() const;

  std::string to_json() const;
  static NetworkConfig from_json(const std::string& text);
  bool operator==(const NetworkConfig&) const = default;
};

// Analytic receptive field (voxels per axis) from composing kernel, dilation
// and stride of every spatial layer down the deepest path.
std::array<int64_t, 3> receptive_field(const NetworkConfig& cfg);

template <typename S>
class NetworkT {
 public:
  NetworkT(NetworkConfig cfg, uint64_t seed);
  NetworkT(const NetworkT&) = delete;
  NetworkT& operator=(const NetworkT&) = delete;
  NetworkT(NetworkT&&) noexcept = default;
  NetworkT& operator=(NetworkT&&) noexcept = default;

  // x: (n, 1, z, y, x) normalized intensities, spatial dims divisible by 4.
  // Returns per-voxel class probabilities (n, 2, z, y, x); channel 1 is tumor.
  const TensorT<S>& forward(const TensorT<S>& x, bool training = false);

  // Accumulates parameter gradients for the last training-mode forward.
  void backward(const TensorT<S>& grad_wrt_probs);
  void zero_grad();

  struct ParamRef {
    std::string name;
    TensorT<S>* value;
    TensorT<S>* grad;
  };
  struct BufferRef {
    std::string name;
    std::vector<S>* data;
  };

  const std::vector<ParamRef>& params() const { return params_; }
  std::vector<BufferRef> buffers();
  int64_t parameter_count() const;

  // Batchnorm running-stat re-estimation window: training forwards between
  // these calls replace the running stats with their exact average.
  void begin_bn_reestimate();
  void end_bn_reestimate();
  const NetworkConfig& config() const { return cfg_; }
  const TensorT<S>& output() const { return output_->out; }

 private:
  ParamNode<S>* add_param(const std::string& name, TensorT<S> init);
  ParamNode<S>* conv_weight(const std::string& name, int64_t co, int64_t ci, int k);
  Node<S>* add(std::unique_ptr<Node<S>> node);
  Node<S>* conv(const std::string& name, Node<S>* x, int64_t co, int64_t ci, int k, int dil);
  Node<S>* conv_bn_relu(const std::string& name, Node<S>* x, int64_t co, int64_t ci, int k,
                        int dil);
  Node<S>* dense_block(const std::string& name, Node<S>* x, int64_t c_in, int64_t* c_out);
  Node<S>* spatial_gate(const std::string& name, Node<S>* x);
  Node<S>* channel_gate(const std::string& name, Node<S>* x, int64_t c);
  Node<S>* ddscab(const std::string& name, Node<S>* x, int64_t c_in, int64_t* c_out);

  NetworkConfig cfg_;
  Rng init_rng_;
  std::vector<std::unique_ptr<Node<S>>> nodes_;  // topological order
  std::vector<ParamRef> params_;
  std::vector<BatchNormNode<S>*> bn_nodes_;
  std::vector<std::string> bn_names_;
  InputNode<S>* input_ = nullptr;
  Node<S>* output_ = nullptr;
};

using Network = NetworkT<float>;

// Checkpoint: text header (format tag, config echo, per-tensor name + shape)
// followed by the raw little-endian float payload; save -> load is bit-exact.
void save_checkpoint(Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path, const NetworkConfig& expected);

extern template class NetworkT<float>;
extern template class NetworkT<double>;

}  // namespace ddaunet
