#include "backbone.hpp"

#include <cmath>

#include "error.hpp"

namespace catf {

namespace {

void add_linear_norm(ParamStore& store, const std::string& prefix, std::size_t in,
                     std::size_t out, Rng& rng) {
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the common default for linear layers.
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  Tensor w({in, out});
  for (float& v : w.data) v = rng.uniform(-bound, bound);
  store.add(prefix + ".w", std::move(w));
  store.add(prefix + ".bn.gamma", Tensor({out}, 1.0f));
  store.add(prefix + ".bn.beta", Tensor({out}, 0.0f));
  store.add(prefix + ".bn.mean", Tensor({out}, 0.0f), ParamKind::kBuffer);
  store.add(prefix + ".bn.var", Tensor({out}, 1.0f), ParamKind::kBuffer);
}

std::string blk(std::size_t l) { return "blk" + std::to_string(l); }

}  // namespace

const char* mixer_mode_name(MixerMode m) {
  switch (m) {
    case MixerMode::kSpikingAttention: return "spiking_attention";
    case MixerMode::kIdentity: return "identity";
    case MixerMode::kRandom: return "random";
    case MixerMode::kFull: return "full";
  }
  return "?";
}

MixerMode parse_mixer_mode(const std::string& s) {
  if (s == "spiking_attention") return MixerMode::kSpikingAttention;
  if (s == "identity") return MixerMode::kIdentity;
  if (s == "random") return MixerMode::kRandom;
  if (s == "full") return MixerMode::kFull;
  throw ConfigError("unknown mixer mode '" + s + "'");
}

void ModelConfig::validate() const {
  if (timesteps == 0 || embed_dim == 0 || num_blocks == 0 || num_heads == 0 || patch_size == 0 ||
      in_channels == 0 || image_size == 0 || ffn_ratio == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (embed_dim % 4 != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by 4");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch " +
                      std::to_string(patch_size));
  }
  neuron.validate();
}

std::size_t ModelConfig::tokens() const {
  const std::size_t g = image_size / patch_size;
  return g * g;
}

std::size_t analytic_backbone_params(const ModelConfig& cfg) {
  const std::size_t D = cfg.embed_dim, H = cfg.ffn_ratio * D;
  std::size_t n = cfg.patch_dim() * D + 2 * D;
  std::size_t block = D * H + 2 * H + H * D + 2 * D;
  if (cfg.uses_attention()) block += 4 * (D * D + 2 * D);
  return n + cfg.num_blocks * block;
}

std::size_t analytic_backbone_buffers(const ModelConfig& cfg) {
  const std::size_t D = cfg.embed_dim, H = cfg.ffn_ratio * D;
  std::size_t block = 2 * H + 2 * D;
  if (cfg.uses_attention()) block += 4 * 2 * D;
  return 2 * D + cfg.num_blocks * block;
}

std::size_t analytic_threshold_entries(const ModelConfig& cfg) {
  const std::size_t D = cfg.embed_dim, H = cfg.ffn_ratio * D;
  std::size_t block = H + D;
  if (cfg.uses_attention()) block += 5 * D;
  return D + cfg.num_blocks * block;
}

Backbone::Backbone(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t D = cfg.embed_dim, H = cfg.ffn_ratio * D;
  add_linear_norm(params_, "pe", cfg.patch_dim(), D, rng);
  for (std::size_t l = 0; l < cfg.num_blocks; ++l) {
    if (cfg.uses_attention()) {
      for (const char* p : {".q", ".k", ".v", ".o"}) add_linear_norm(params_, blk(l) + p, D, D, rng);
    }
    add_linear_norm(params_, blk(l) + ".ffn1", D, H, rng);
    add_linear_norm(params_, blk(l) + ".ffn2", H, D, rng);
  }
}

std::vector<std::string> Backbone::layer_names() const {
  std::vector<std::string> names{"pe"};
  for (std::size_t l = 0; l < cfg_.num_blocks; ++l) {
    if (cfg_.uses_attention()) {
      for (const char* p : {".q", ".k", ".v", ".attn", ".o"}) names.push_back(blk(l) + p);
    }
    names.push_back(blk(l) + ".ffn");
    names.push_back(blk(l) + ".out");
  }
  return names;
}

void Backbone::declare_layers(ThresholdBank& bank) const {
  const std::size_t D = cfg_.embed_dim;
  for (const std::string& name : layer_names()) {
    const bool hidden = name.size() > 4 && name.compare(name.size() - 4, 4, ".ffn") == 0;
    bank.add_layer(name, hidden ? cfg_.ffn_ratio * D : D);
  }
}

bool Backbone::is_ffn_param(const std::string& name) const {
  return name.find(".ffn1.") != std::string::npos || name.find(".ffn2.") != std::string::npos;
}

std::vector<Tensor*> Backbone::trainable_tensors() {
  std::vector<Tensor*> out;
  for (auto& e : params_.entries()) {
    if (e.kind != ParamKind::kWeight) continue;
    if (!cfg_.ffn_trainable && is_ffn_param(e.name)) continue;
    out.push_back(e.tensor.get());
  }
  return out;
}

Tensor encode_input(const Tensor& x, std::size_t timesteps) {
  if (timesteps == 0) throw ConfigError("encode_input: timesteps must be positive");
  for (float v : x.data) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw DomainError("encode_input: pixel value " + std::to_string(v) + " outside [0, 1]");
    }
  }
  Shape s{timesteps};
  s.insert(s.end(), x.shape.begin(), x.shape.end());
  Tensor out(s);
  for (std::size_t t = 0; t < timesteps; ++t) {
    std::copy(x.data.begin(), x.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(t * x.numel()));
  }
  return out;
}

Tensor patchify(const Tensor& frames, const ModelConfig& cfg) {
  const std::size_t C = cfg.in_channels, S = cfg.image_size, p = cfg.patch_size;
  if (S % p != 0) throw ConfigError("image size not divisible by patch size");
  const std::size_t frame = C * S * S;
  if (frames.ndim() < 1 || frames.dim(0) != cfg.timesteps || frames.numel() % (cfg.timesteps * frame) != 0) {
    throw DimensionError("patchify: frames " + shape_str(frames.shape) + " do not match T=" +
                         std::to_string(cfg.timesteps) + " x C x " + std::to_string(S) + " x " +
                         std::to_string(S));
  }
  const std::size_t TB = frames.numel() / frame;
  const std::size_t g = S / p, N = g * g, P = C * p * p;
  Tensor out({TB * N, P});
  for (std::size_t f = 0; f < TB; ++f) {
    const float* src = &frames.data[f * frame];
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx) {
        float* dst = &out.data[(f * N + gy * g + gx) * P];
        std::size_t k = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              dst[k++] = src[(c * S + gy * p + y) * S + gx * p + x];
      }
  }
  return out;
}

Var bind_thresholds(Tape& tape, ThresholdBank& bank) {
  const TaskRef ref = bank.active();
  if (ref.is_base()) return tape.constant(bank.base_thresholds());
  return tape.param(bank.thresholds(ref.id()));
}

BackboneRun::BackboneRun(Tape& tape, Backbone& backbone, const ThresholdBank& bank,
                         Var thresholds, std::size_t batch, const ForwardOptions& opts)
    : tape_(tape),
      bb_(backbone),
      bank_(bank),
      thresholds_(thresholds),
      batch_(batch),
      rows_(backbone.config().timesteps * batch * backbone.config().tokens()),
      opts_(opts) {
  if (bank.entries_per_task() != analytic_threshold_entries(backbone.config())) {
    throw ContractError("threshold bank layout does not match the backbone");
  }
}

Var BackboneRun::linear_norm(Var x, const std::string& prefix) {
  ParamStore& ps = bb_.params();
  Var w = tape_.param(ps.get(prefix + ".w"));
  Var h = matmul(tape_, x, w);
  BatchNormBuffers buf{&ps.get(prefix + ".bn.mean"), &ps.get(prefix + ".bn.var")};
  return batch_norm(tape_, h, tape_.param(ps.get(prefix + ".bn.gamma")),
                    tape_.param(ps.get(prefix + ".bn.beta")), buf, opts_.norm);
}

Var BackboneRun::lif(Var current, const std::string& layer) {
  const ThresholdLayer& L = bank_.layer(bank_.find_layer(layer));
  Var phi = slice_flat(tape_, thresholds_, L.offset, L.channels);
  return dtlif_sequence(tape_, current, bb_.config().timesteps, phi, bb_.config().neuron);
}

Var BackboneRun::patch_embed(const Tensor& frames) {
  Var patches = tape_.constant(patchify(frames, bb_.config()));
  if (tape_.value(patches).dim(0) != rows_) {
    throw DimensionError("patch_embed: batch size does not match frames");
  }
  return lif(linear_norm(patches, "pe"), "pe");
}

Var BackboneRun::spiking_self_attention(Var spikes, std::size_t l) {
  const ModelConfig& cfg = bb_.config();
  if (!cfg.uses_attention()) throw ContractError("spiking_self_attention: mixer has no attention");
  const std::string b = blk(l);
  Var q = lif(linear_norm(spikes, b + ".q"), b + ".q");
  Var k = lif(linear_norm(spikes, b + ".k"), b + ".k");
  Var v = lif(linear_norm(spikes, b + ".v"), b + ".v");
  Var a = attention_core(tape_, q, k, v, cfg.timesteps * batch_, cfg.tokens(), cfg.num_heads,
                         cfg.attn_scale);
  Var as = lif(a, b + ".attn");
  return lif(linear_norm(as, b + ".o"), b + ".o");
}

Var BackboneRun::mixer_dispatch(Var spikes, std::size_t l) {
  const ModelConfig& cfg = bb_.config();
  switch (cfg.mixer_mode) {
    case MixerMode::kSpikingAttention:
    case MixerMode::kFull:
      return spiking_self_attention(spikes, l);
    case MixerMode::kIdentity:
      return spikes;
    case MixerMode::kRandom: {
      if (opts_.noise_keys.size() != batch_) {
        throw ContractError("random mixer needs one noise key per sample");
      }
      const std::size_t T = cfg.timesteps, N = cfg.tokens(), D = cfg.embed_dim;
      Tensor noise(tape_.value(spikes).shape);
      const std::uint64_t block_seed = mix_seed(cfg.mixer_seed, l + 1);
      for (std::size_t b = 0; b < batch_; ++b) {
        Rng rng(mix_seed(block_seed, opts_.noise_keys[b]));
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t n = 0; n < N; ++n) {
            float* row = &noise.data[((t * batch_ + b) * N + n) * D];
            for (std::size_t d = 0; d < D; ++d) row[d] = rng.uniform();
          }
      }
      return tape_.constant(std::move(noise));
    }
  }
  throw ContractError("unknown mixer mode");
}

Var BackboneRun::block(Var spikes, std::size_t l) {
  const std::string b = blk(l);
  Var mixed = mixer_dispatch(spikes, l);
  Var r1 = add(tape_, spikes, mixed);
  Var hidden = lif(linear_norm(r1, b + ".ffn1"), b + ".ffn");
  Var r2 = add(tape_, r1, linear_norm(hidden, b + ".ffn2"));
  return lif(r2, b + ".out");
}

Var BackboneRun::features(const Tensor& frames) {
  const ModelConfig& cfg = bb_.config();
  Var s = patch_embed(frames);
  for (std::size_t l = 0; l < cfg.num_blocks; ++l) s = block(s, l);
  return mean_pool(tape_, s, cfg.timesteps, batch_, cfg.tokens());
}

Var backbone_forward(Tape& tape, Backbone& backbone, ThresholdBank& bank, const Tensor& frames,
                     const ForwardOptions& opts) {
  const ModelConfig& cfg = backbone.config();
  const std::size_t frame = cfg.in_channels * cfg.image_size * cfg.image_size;
  if (frames.numel() % (cfg.timesteps * frame) != 0) {
    throw DimensionError("backbone_forward: frames " + shape_str(frames.shape) +
                         " do not match the model input");
  }
  const std::size_t batch = frames.numel() / (cfg.timesteps * frame);
  Var phi = bind_thresholds(tape, bank);
  BackboneRun run(tape, backbone, bank, phi, batch, opts);
  return run.features(frames);
}

Tensor backbone_forward(Backbone& backbone, ThresholdBank& bank, const Tensor& image) {
  Tape tape;
  Tensor frames = encode_input(image, backbone.config().timesteps);
  const std::uint64_t key = hash_floats(image.data);
  ForwardOptions opts;
  opts.noise_keys = std::span<const std::uint64_t>(&key, 1);
  Var f = backbone_forward(tape, backbone, bank, frames, opts);
  Tensor out = tape.value(f);
  out.shape = {backbone.config().embed_dim};
  return out;
}

Var head_forward(Tape& tape, Var features, Var weight, Var bias) {
  const Tensor& W = tape.value(weight);
  const Tensor& b = tape.value(bias);
  if (W.ndim() != 2 || b.numel() != W.dim(1)) {
    throw DimensionError("head_forward: weight " + shape_str(W.shape) + " and bias " +
                         shape_str(b.shape) + " disagree");
  }
  return add_bias(tape, matmul(tape, features, weight), bias);
}

}  // namespace catf
