#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tgar/engine.hpp"
#include "tgar/graph.hpp"
#include "tgar/parameters.hpp"

namespace tgar {

enum class Activation { identity, relu, tanh, leaky_relu };
enum class LayerKind { gcn, gat_edge };
enum class DecoderKind { identity, linear };
/// Which weight matrices the L2 penalty covers.
enum class RegScope { first, all };

std::string to_string(Activation a);
std::string to_string(LayerKind k);
std::string to_string(DecoderKind k);
std::string to_string(RegScope s);
std::string to_string(GcnNorm n);
Activation parse_activation(const std::string& s);
LayerKind parse_layer_kind(const std::string& s);
DecoderKind parse_decoder(const std::string& s);
RegScope parse_reg_scope(const std::string& s);
GcnNorm parse_norm(const std::string& s);

/// Applies `a` on a tape. Leaky relu uses slope 0.2.
Tape::Var activate(Tape& t, Tape::Var x, Activation a);
real activate(real x, Activation a);
real activate_derivative(real x, Activation a);

struct LayerSpec {
  LayerKind kind = LayerKind::gcn;
  std::size_t out_dim = 16;
  Activation activation = Activation::relu;
  bool bias = false;
  bool operator==(const LayerSpec&) const = default;
};

struct ModelSpec {
  std::size_t input_dim = 0;
  std::size_t class_count = 0;
  std::vector<LayerSpec> layers;
  /// Dropout keep probability on every layer input while training.
  double keep_prob = 1.0;
  DecoderKind decoder = DecoderKind::linear;
  bool decoder_zero_init = false;
  /// L2 coefficient lambda; the penalty is lambda / 2 * sum W^2.
  double l2 = 0;
  RegScope reg_scope = RegScope::first;
  GcnNorm norm = GcnNorm::renormalized;
  /// Self-loops for the laplacian normalization (renormalized always adds them).
  bool add_self_loops = false;
  /// Width of the projected edge features in attention layers (0 = out_dim).
  std::size_t edge_proj_dim = 0;

  std::size_t layer_count() const { return layers.size(); }
  /// Throws ConfigError when dims do not chain or values are out of range.
  void validate() const;
  /// Stable text form; its hash keys checkpoints.
  std::string canonical() const;
  std::uint64_t hash() const;
  bool operator==(const ModelSpec&) const = default;
};

/// Layer programs plus decoder for one graph.
class Model {
 public:
  Model(ModelSpec spec, const Graph& g);

  const ModelSpec& spec() const { return spec_; }
  int layers() const { return static_cast<int>(programs_.size()); }
  const LayerProgram& program(int layer) const { return programs_.at(static_cast<std::size_t>(layer - 1)); }

  /// Glorot-uniform weights, zero biases and attention offsets.
  ParameterSet init_params(std::uint64_t seed) const;
  /// Owning layer per parameter; the decoder is tagged K + 1.
  const std::vector<int>& layer_of_param() const { return layer_of_param_; }
  /// Parameters covered by the L2 penalty.
  const std::vector<bool>& regularized() const { return regularized_; }
  /// Index of the decoder weight, or -1 for the identity decoder.
  int decoder_weight() const { return decoder_weight_; }
  int decoder_bias() const { return decoder_bias_; }

  /// lambda / 2 * sum of squares over regularized parameters.
  double penalty(const ParameterSet& params) const;
  /// Adds lambda * W into `grads` for regularized parameters.
  void add_penalty_grad(const ParameterSet& params, ParameterSet& grads) const;

 private:
  LayerProgram make_gcn(int layer, std::size_t in, const LayerSpec& ls, const GcnWeights& w);
  LayerProgram make_gat(int layer, std::size_t in, const LayerSpec& ls);

  ModelSpec spec_;
  std::size_t edge_dim_ = 0;
  std::vector<LayerProgram> programs_;
  std::vector<std::string> names_;
  std::vector<std::pair<std::size_t, std::size_t>> shapes_;
  std::vector<bool> glorot_;
  std::vector<int> layer_of_param_;
  std::vector<bool> regularized_;
  int decoder_weight_ = -1;
  int decoder_bias_ = -1;
};

/// Inverted-dropout mask value for one input entry: 0 or 1 / keep.
real dropout_scale(std::uint64_t seed, std::uint64_t step, int layer, node_id node, std::size_t col, double keep);

struct DecodeResult {
  /// Per-row data loss, in output row order.
  Tensor row_loss;
  Tensor logits;
  /// Upstream gradient for h^K rows (zero on rows without a label).
  Tensor grad_h;
  std::vector<int> predicted;
};

/// Decoder then softmax cross-entropy on the rows whose label is >= 0. Each
/// labeled row's loss is scaled by `row_weight` in the gradient (1 / targets
/// for a mean). Decoder gradients go to `sinks` when non-null.
DecodeResult decode_and_loss(const Model& model, const ParameterSet& params, const Tensor& h,
                             const std::vector<int>& labels, real row_weight, std::vector<ExactTensor>* sinks);

}  // namespace tgar
