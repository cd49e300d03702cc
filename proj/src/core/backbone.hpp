#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dtlif.hpp"
#include "ops.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tape.hpp"

namespace catf {

enum class MixerMode { kSpikingAttention, kIdentity, kRandom, kFull };

const char* mixer_mode_name(MixerMode m);
MixerMode parse_mixer_mode(const std::string& s);

struct ModelConfig {
  std::size_t timesteps = 4;
  std::size_t embed_dim = 64;
  std::size_t num_blocks = 2;
  std::size_t num_heads = 4;
  std::size_t patch_size = 4;
  std::size_t in_channels = 1;
  std::size_t image_size = 16;
  std::size_t ffn_ratio = 2;
  MixerMode mixer_mode = MixerMode::kSpikingAttention;
  bool ffn_trainable = true;
  float attn_scale = 0.125f;
  std::uint64_t mixer_seed = 0;
  DTLIFConfig neuron;

  void validate() const;
  std::size_t tokens() const;
  std::size_t patch_dim() const { return in_channels * patch_size * patch_size; }
  bool uses_attention() const {
    return mixer_mode == MixerMode::kSpikingAttention || mixer_mode == MixerMode::kFull;
  }
};

// Learnable tensor count of the backbone, computed from the config alone.
std::size_t analytic_backbone_params(const ModelConfig& cfg);
// Running-statistic entries (two per normalized channel).
std::size_t analytic_backbone_buffers(const ModelConfig& cfg);
// Threshold entries per task: sum of channels over all DTLIF layers.
std::size_t analytic_threshold_entries(const ModelConfig& cfg);

// Spiking-transformer feature extractor. Owns the weights; thresholds live
// in a ThresholdBank whose layers are declared by declare_layers().
class Backbone {
 public:
  Backbone() = default;
  Backbone(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Registers DTLIF layers in forward order.
  void declare_layers(ThresholdBank& bank) const;
  std::vector<std::string> layer_names() const;

  // Tensors updated by task-0 training (weights and affines; FFN weights
  // are excluded when ffn_trainable is false).
  std::vector<Tensor*> trainable_tensors();
  bool is_ffn_param(const std::string& name) const;

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

struct ForwardOptions {
  NormMode norm = NormMode::kEval;
  // One key per sample seeding the random mixer; ignored by other modes.
  std::span<const std::uint64_t> noise_keys;
};

// Direct coding: x [C x H x W] or [B x C x H x W] in [0, 1] replicated over
// T timesteps into [T x ...].
Tensor encode_input(const Tensor& x, std::size_t timesteps);

// [T x B x C x H x W] frames to [T*B*N x C*p*p] non-overlapping patches,
// tokens in row-major patch order, each patch flattened channel-major.
Tensor patchify(const Tensor& frames, const ModelConfig& cfg);

// Binds the thresholds selected by bank.active() on the tape. Task
// thresholds bind as params so a trainer can collect their gradient.
Var bind_thresholds(Tape& tape, ThresholdBank& bank);

class BackboneRun {
 public:
  BackboneRun(Tape& tape, Backbone& backbone, const ThresholdBank& bank, Var thresholds,
              std::size_t batch, const ForwardOptions& opts);

  Var patch_embed(const Tensor& frames);
  Var spiking_self_attention(Var spikes, std::size_t block);
  Var mixer_dispatch(Var spikes, std::size_t block);
  Var block(Var spikes, std::size_t block);
  // Mean over timesteps and tokens of the final spikes: [B x D].
  Var features(const Tensor& frames);

  std::size_t rows() const { return rows_; }

 private:
  Var linear_norm(Var x, const std::string& prefix);
  Var lif(Var current, const std::string& layer);

  Tape& tape_;
  Backbone& bb_;
  const ThresholdBank& bank_;
  Var thresholds_;
  std::size_t batch_;
  std::size_t rows_;
  ForwardOptions opts_;
};

// Features [B x D] for a batch of frames [T x B x C x H x W].
Var backbone_forward(Tape& tape, Backbone& backbone, ThresholdBank& bank, const Tensor& frames,
                     const ForwardOptions& opts = {});

// f(x) in R^D for a single image [C x H x W]; resets all neuron state.
Tensor backbone_forward(Backbone& backbone, ThresholdBank& bank, const Tensor& image);

// logits = f W + b
Var head_forward(Tape& tape, Var features, Var weight, Var bias);

}  // namespace catf
