#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pointform/error.hpp"
#include "pointform/geometry.hpp"
#include "pointform/ops.hpp"
#include "pointform/tensor.hpp"

namespace pointform {

struct ModelConfig {
  std::size_t blocks = 4;
  std::size_t heads = 6;
  std::size_t dim = 96;
  std::size_t decoder_blocks = 2;
  std::size_t mlp_ratio = 4;
  std::size_t patches = 64;     // N
  std::size_t group_size = 32;  // K
  std::size_t classes = 8;
  std::size_t embed_hidden = 32;
  std::size_t embed_width = 64;
  std::size_t pos_hidden = 128;
  std::size_t head_hidden = 128;

  /// Full-scale reference: 12 blocks, 6 heads, width 384.
  static ModelConfig reference_scale() {
    ModelConfig c;
    c.blocks = 12;
    c.dim = 384;
    c.embed_hidden = 128;
    c.embed_width = 256;
    c.head_hidden = 256;
    return c;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) fail(ErrorKind::Config, std::string("model: ") + name + " must be >= 1");
    };
    positive(heads, "heads");
    positive(dim, "dim");
    positive(decoder_blocks, "decoder-blocks");
    positive(mlp_ratio, "mlp-ratio");
    positive(patches, "patches");
    positive(group_size, "group-size");
    positive(classes, "classes");
    positive(embed_hidden, "embed-hidden");
    positive(embed_width, "embed-width");
    positive(pos_hidden, "pos-hidden");
    positive(head_hidden, "head-hidden");
    if (dim % heads != 0) {
      fail(ErrorKind::Config, "model: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"blocks", c.blocks},           {"heads", c.heads},
                     {"dim", c.dim},                 {"decoder_blocks", c.decoder_blocks},
                     {"mlp_ratio", c.mlp_ratio},     {"patches", c.patches},
                     {"group_size", c.group_size},   {"classes", c.classes},
                     {"embed_hidden", c.embed_hidden}, {"embed_width", c.embed_width},
                     {"pos_hidden", c.pos_hidden},   {"head_hidden", c.head_hidden}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("blocks").get_to(c.blocks);
  j.at("heads").get_to(c.heads);
  j.at("dim").get_to(c.dim);
  j.at("decoder_blocks").get_to(c.decoder_blocks);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("patches").get_to(c.patches);
  j.at("group_size").get_to(c.group_size);
  j.at("classes").get_to(c.classes);
  j.at("embed_hidden").get_to(c.embed_hidden);
  j.at("embed_width").get_to(c.embed_width);
  j.at("pos_hidden").get_to(c.pos_hidden);
  j.at("head_hidden").get_to(c.head_hidden);
}

enum class ParamGroup { Embedder, Positional, ClsToken, Encoder, Decoder, Head };

inline bool is_backbone(ParamGroup g) {
  return g == ParamGroup::Embedder || g == ParamGroup::Positional || g == ParamGroup::ClsToken ||
         g == ParamGroup::Encoder;
}

/// Ordered name -> parameter map. The trainable flag of an entry is the
/// requires_grad flag of its tensor.
class ParamRegistry {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    ParamGroup group;
    bool decay;  // weight decay applies (matrices only)
  };

  const Tensor& add(std::string name, Tensor tensor, ParamGroup group, bool decay) {
    if (index_.count(name)) fail(ErrorKind::Usage, "duplicate parameter name " + name);
    tensor.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(tensor), group, decay});
    return entries_.back().tensor;
  }

  const Tensor& get(const std::string& name) const { return entries_.at(lookup(name)).tensor; }
  Tensor& get(const std::string& name) { return entries_.at(lookup(name)).tensor; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::span<const Entry> entries() const { return entries_; }
  std::span<Entry> entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  bool trainable(const std::string& name) const { return get(name).requires_grad(); }
  void set_trainable(const std::string& name, bool on) { get(name).set_requires_grad(on); }

  template <typename Pred>
  void set_trainable_where(Pred&& pred, bool on) {
    for (auto& e : entries_)
      if (pred(e)) e.tensor.set_requires_grad(on);
  }

  void set_all_trainable(bool on) {
    for (auto& e : entries_) e.tensor.set_requires_grad(on);
  }

  /// Total scalar count over trainable entries.
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.tensor.requires_grad()) n += e.tensor.numel();
    return n;
  }

  std::size_t count_where(ParamGroup group) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.group == group) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::Usage, "unknown parameter " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Post-softmax attention matrices of one forward pass, layer-major then
/// head-major, each tokens x tokens.
struct AttentionRecord {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<double> data;
  // token position -> patch index; -1 for the CLS token.
  std::vector<long> token_patch;

  std::span<const double> matrix(std::size_t layer, std::size_t head) const {
    return {data.data() + (layer * heads + head) * tokens * tokens, tokens * tokens};
  }
};

struct EncodeOptions {
  bool capture = false;
  std::optional<std::size_t> depth;  // stop after this many blocks
  bool keep_block_outputs = false;
};

struct EncodeResult {
  Tensor features;  // (1 + N) x dim, CLS first
  std::optional<AttentionRecord> attention;
  std::vector<Tensor> block_outputs;
};

namespace detail {

struct LinearRef {
  Tensor weight, bias;
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct NormRef {
  Tensor gamma, beta;
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, 1e-5); }
};

struct BlockRef {
  NormRef norm1, norm2;
  LinearRef q, k, v, proj, fc1, fc2;
};

}  // namespace detail

class TransformerModel {
 public:
  explicit TransformerModel(const ModelConfig& config, std::uint64_t seed = 0) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    build(rng);
    bind();
  }

  const ModelConfig& config() const { return config_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

  /// Deep copy with independent parameter storage and equal trainable flags.
  TransformerModel clone() const {
    TransformerModel copy(config_, params_);
    return copy;
  }

  /// Shared pointwise MLP (layer-normalized), max-pool over each group,
  /// projection to dim.
  /// `groups` is [N*K x 3] in center-relative coordinates.
  Tensor embed_patches(const Tensor& groups) const {
    const std::size_t k = config_.group_size;
    if (groups.rank() != 2 || groups.cols() != 3 || groups.rows() % k != 0) {
      fail(ErrorKind::Config, "embed_patches: expected [N*" + std::to_string(k) + " x 3], got " + shape_str(groups.shape()));
    }
    Tensor h = gelu(embed_.norm1(embed_.fc1(groups)));
    h = gelu(embed_.norm2(embed_.fc2(h)));
    h = max_pool_groups(h, k);
    return embed_.proj(h);
  }

  /// Learned two-layer MLP from center coordinates [N x 3] to [N x dim].
  Tensor positional_encoding(const Tensor& centers) const { return positional(pos_, centers); }

  /// Prepends CLS (token + its positional embedding) to tokens + positions and
  /// runs the encoder blocks.
  EncodeResult encode(const Tensor& tokens, const Tensor& positions, const EncodeOptions& opt = {}) const {
    if (tokens.shape() != positions.shape()) {
      fail(ErrorKind::Dimension, "encode: token " + shape_str(tokens.shape()) + " vs position " + shape_str(positions.shape()));
    }
    return encode_input(add(tokens, positions), opt);
  }

  /// Same as encode() for an already combined [N x dim] input. An undefined
  /// input encodes the CLS token alone.
  EncodeResult encode_input(const Tensor& combined, const EncodeOptions& opt = {}) const {
    if (combined.defined() && (combined.rank() != 2 || combined.cols() != config_.dim)) {
      fail(ErrorKind::Dimension, "encode: expected [N x " + std::to_string(config_.dim) + "], got " + shape_str(combined.shape()));
    }
    const std::size_t depth = opt.depth ? std::min(*opt.depth, config_.blocks) : config_.blocks;
    Tensor x = combined.defined() ? concat_rows({add(cls_token_, cls_pos_), combined}) : add(cls_token_, cls_pos_);
    EncodeResult result;
    AttentionRecord* record = nullptr;
    if (opt.capture) {
      result.attention.emplace();
      record = &*result.attention;
      record->layers = depth;
      record->heads = config_.heads;
      record->tokens = x.rows();
      record->data.reserve(depth * config_.heads * x.rows() * x.rows());
      record->token_patch.push_back(-1);
      for (std::size_t i = 0; i + 1 < x.rows(); ++i) record->token_patch.push_back(static_cast<long>(i));
    }
    for (std::size_t b = 0; b < depth; ++b) {
      x = run_block(encoder_[b], x, record);
      if (opt.keep_block_outputs) result.block_outputs.push_back(x);
    }
    result.features = x;
    return result;
  }

  /// Reconstructs masked groups: [M x K x 3] center-relative coordinates.
  Tensor decode_masked(const Tensor& visible_features, const Tensor& visible_centers, const Tensor& masked_centers) const {
    if (!masked_centers.defined() || masked_centers.rows() == 0) fail(ErrorKind::Input, "decode_masked: nothing to reconstruct");
    if (visible_features.rows() != visible_centers.rows()) fail(ErrorKind::Dimension, "decode_masked: visible feature/center count mismatch");
    const std::size_t m = masked_centers.rows();
    Tensor vis = add(visible_features, positional(dec_pos_, visible_centers));
    Tensor msk = add(repeat_rows(mask_token_, m), positional(dec_pos_, masked_centers));
    Tensor x = concat_rows({vis, msk});
    for (const auto& block : decoder_) x = run_block(block, x, nullptr);
    x = dec_norm_(x);
    Tensor tail = slice_rows(x, visible_features.rows(), x.rows());
    return reshape(dec_head_(tail), Shape{m, config_.group_size, 3});
  }

  /// Logits [1 x classes] from the CLS row of `features`.
  Tensor classify(const Tensor& features) const {
    Tensor cls = slice_rows(features, 0, 1);
    Tensor h = head_norm_(cls);
    h = gelu(head_fc1_(h));
    h = gelu(head_fc2_(h));
    return head_fc3_(h);
  }

 private:
  TransformerModel(const ModelConfig& config, const ParamRegistry& source) : config_(config) {
    for (const auto& e : source.entries()) {
      params_.add(e.name, e.tensor.detach(), e.group, e.decay);
      params_.set_trainable(e.name, e.tensor.requires_grad());
    }
    bind();
  }

  static Tensor truncated_normal(Shape shape, std::mt19937_64& rng, double sigma = 0.02) {
    std::normal_distribution<double> dist(0.0, sigma);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
      do v = dist(rng);
      while (std::abs(v) > 2.0 * sigma);
    }
    return Tensor(std::move(shape), std::move(values));
  }

  void add_linear(const std::string& name, std::size_t in, std::size_t out, ParamGroup group, std::mt19937_64& rng) {
    params_.add(name + ".weight", truncated_normal({in, out}, rng), group, true);
    params_.add(name + ".bias", Tensor(Shape{out}, 0.0), group, false);
  }

  void add_norm(const std::string& name, std::size_t width, ParamGroup group) {
    params_.add(name + ".gamma", Tensor(Shape{width}, 1.0), group, false);
    params_.add(name + ".beta", Tensor(Shape{width}, 0.0), group, false);
  }

  void add_block(const std::string& prefix, ParamGroup group, std::mt19937_64& rng) {
    const std::size_t d = config_.dim, hidden = config_.dim * config_.mlp_ratio;
    add_norm(prefix + ".norm1", d, group);
    add_linear(prefix + ".attn.q", d, d, group, rng);
    add_linear(prefix + ".attn.k", d, d, group, rng);
    add_linear(prefix + ".attn.v", d, d, group, rng);
    add_linear(prefix + ".attn.proj", d, d, group, rng);
    add_norm(prefix + ".norm2", d, group);
    add_linear(prefix + ".mlp.fc1", d, hidden, group, rng);
    add_linear(prefix + ".mlp.fc2", hidden, d, group, rng);
  }

  void build(std::mt19937_64& rng) {
    const auto& c = config_;
    add_linear("embed.fc1", 3, c.embed_hidden, ParamGroup::Embedder, rng);
    add_norm("embed.norm1", c.embed_hidden, ParamGroup::Embedder);
    add_linear("embed.fc2", c.embed_hidden, c.embed_width, ParamGroup::Embedder, rng);
    add_norm("embed.norm2", c.embed_width, ParamGroup::Embedder);
    add_linear("embed.proj", c.embed_width, c.dim, ParamGroup::Embedder, rng);
    add_linear("pos.fc1", 3, c.pos_hidden, ParamGroup::Positional, rng);
    add_linear("pos.fc2", c.pos_hidden, c.dim, ParamGroup::Positional, rng);
    params_.add("cls.token", truncated_normal({1, c.dim}, rng), ParamGroup::ClsToken, false);
    params_.add("cls.pos", truncated_normal({1, c.dim}, rng), ParamGroup::ClsToken, false);
    for (std::size_t b = 0; b < c.blocks; ++b) add_block("enc.block" + std::to_string(b), ParamGroup::Encoder, rng);
    add_linear("dec.pos.fc1", 3, c.pos_hidden, ParamGroup::Decoder, rng);
    add_linear("dec.pos.fc2", c.pos_hidden, c.dim, ParamGroup::Decoder, rng);
    params_.add("dec.mask_token", truncated_normal({1, c.dim}, rng), ParamGroup::Decoder, false);
    for (std::size_t b = 0; b < c.decoder_blocks; ++b) add_block("dec.block" + std::to_string(b), ParamGroup::Decoder, rng);
    add_norm("dec.norm", c.dim, ParamGroup::Decoder);
    add_linear("dec.head", c.dim, c.group_size * 3, ParamGroup::Decoder, rng);
    add_norm("head.norm", c.dim, ParamGroup::Head);
    add_linear("head.fc1", c.dim, c.head_hidden, ParamGroup::Head, rng);
    add_linear("head.fc2", c.head_hidden, c.head_hidden, ParamGroup::Head, rng);
    add_linear("head.fc3", c.head_hidden, c.classes, ParamGroup::Head, rng);
  }

  detail::LinearRef lin(const std::string& name) const {
    return {params_.get(name + ".weight"), params_.get(name + ".bias")};
  }
  detail::NormRef nrm(const std::string& name) const {
    return {params_.get(name + ".gamma"), params_.get(name + ".beta")};
  }
  detail::BlockRef blk(const std::string& p) const {
    return {nrm(p + ".norm1"), nrm(p + ".norm2"), lin(p + ".attn.q"), lin(p + ".attn.k"), lin(p + ".attn.v"),
            lin(p + ".attn.proj"), lin(p + ".mlp.fc1"), lin(p + ".mlp.fc2")};
  }

  void bind() {
    embed_ = {lin("embed.fc1"), nrm("embed.norm1"), lin("embed.fc2"), nrm("embed.norm2"), lin("embed.proj")};
    pos_ = {lin("pos.fc1"), lin("pos.fc2")};
    cls_token_ = params_.get("cls.token");
    cls_pos_ = params_.get("cls.pos");
    encoder_.clear();
    for (std::size_t b = 0; b < config_.blocks; ++b) encoder_.push_back(blk("enc.block" + std::to_string(b)));
    dec_pos_ = {lin("dec.pos.fc1"), lin("dec.pos.fc2")};
    mask_token_ = params_.get("dec.mask_token");
    decoder_.clear();
    for (std::size_t b = 0; b < config_.decoder_blocks; ++b) decoder_.push_back(blk("dec.block" + std::to_string(b)));
    dec_norm_ = nrm("dec.norm");
    dec_head_ = lin("dec.head");
    head_norm_ = nrm("head.norm");
    head_fc1_ = lin("head.fc1");
    head_fc2_ = lin("head.fc2");
    head_fc3_ = lin("head.fc3");
  }

  struct PosRef {
    detail::LinearRef fc1, fc2;
  };
  struct EmbedRef {
    detail::LinearRef fc1;
    detail::NormRef norm1;
    detail::LinearRef fc2;
    detail::NormRef norm2;
    detail::LinearRef proj;
  };

  static Tensor positional(const PosRef& p, const Tensor& centers) {
    if (centers.rank() != 2 || centers.cols() != 3) fail(ErrorKind::Dimension, "positional encoding expects [N x 3] centers");
    return p.fc2(gelu(p.fc1(centers)));
  }

  // Pre-norm block: x + attn(norm1(x)), then x + mlp(norm2(x)).
  Tensor run_block(const detail::BlockRef& b, const Tensor& x, AttentionRecord* record) const {
    const std::size_t heads = config_.heads, dh = config_.dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor h = b.norm1(x);
    Tensor q = b.q(h), k = b.k(h), v = b.v(h);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      Tensor qh = heads == 1 ? q : slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor kh = heads == 1 ? k : slice_cols(k, hd * dh, (hd + 1) * dh);
      Tensor vh = heads == 1 ? v : slice_cols(v, hd * dh, (hd + 1) * dh);
      Tensor att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
      if (record) record->data.insert(record->data.end(), att.values().begin(), att.values().end());
      outs.push_back(matmul(att, vh));
    }
    Tensor mixed = heads == 1 ? outs.front() : concat_cols(outs);
    Tensor y = add(x, b.proj(mixed));
    return add(y, b.fc2(gelu(b.fc1(b.norm2(y)))));
  }

  ModelConfig config_;
  ParamRegistry params_;
  EmbedRef embed_;
  PosRef pos_;
  Tensor cls_token_, cls_pos_;
  std::vector<detail::BlockRef> encoder_;
  PosRef dec_pos_;
  Tensor mask_token_;
  std::vector<detail::BlockRef> decoder_;
  detail::NormRef dec_norm_;
  detail::LinearRef dec_head_;
  detail::NormRef head_norm_;
  detail::LinearRef head_fc1_, head_fc2_, head_fc3_;
};

/// Read-only view whose forward passes stop after `keep` encoder blocks.
class TruncatedModel {
 public:
  TruncatedModel(const TransformerModel& model, std::size_t keep) : model_(&model), keep_(keep) {
    if (keep > model.config().blocks) {
      fail(ErrorKind::Config, "truncate: keep " + std::to_string(keep) + " exceeds depth " + std::to_string(model.config().blocks));
    }
  }

  std::size_t depth() const { return keep_; }
  const TransformerModel& model() const { return *model_; }

  EncodeResult encode(const Tensor& tokens, const Tensor& positions, EncodeOptions opt = {}) const {
    opt.depth = keep_;
    return model_->encode(tokens, positions, opt);
  }

  Tensor classify(const Tensor& features) const { return model_->classify(features); }

 private:
  const TransformerModel* model_;
  std::size_t keep_;
};

inline TruncatedModel truncate_depth(const TransformerModel& model, std::size_t keep) { return {model, keep}; }

// ------------------------------------------------------------------ helpers

/// Patch centers [N x 3] and flat groups [N*K x 3] for the selected patches.
struct PatchTensors {
  Tensor centers;
  Tensor groups;
};

inline PatchTensors patch_tensors(const PatchSet& patches, std::span<const std::size_t> subset) {
  std::vector<double> c, g;
  c.reserve(subset.size() * 3);
  g.reserve(subset.size() * patches.k * 3);
  for (auto idx : subset) {
    if (idx >= patches.count()) fail(ErrorKind::Input, "patch index out of range");
    c.insert(c.end(), patches.centers[idx].begin(), patches.centers[idx].end());
    for (const auto& p : patches.group(idx)) g.insert(g.end(), p.begin(), p.end());
  }
  return {Tensor(Shape{subset.size(), 3}, std::move(c)), Tensor(Shape{subset.size() * patches.k, 3}, std::move(g))};
}

inline PatchTensors patch_tensors(const PatchSet& patches) {
  std::vector<std::size_t> all(patches.count());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return patch_tensors(patches, all);
}

/// Full classification forward over all patches.
inline Tensor forward_logits(const TransformerModel& model, const PatchSet& patches,
                             std::optional<std::size_t> depth = std::nullopt) {
  auto pt = patch_tensors(patches);
  EncodeOptions opt;
  opt.depth = depth;
  auto enc = model.encode(model.embed_patches(pt.groups), model.positional_encoding(pt.centers), opt);
  return model.classify(enc.features);
}

}  // namespace pointform
