#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rvit/rng.hpp"
#include "rvit/tape.hpp"

namespace rvit {

// A patch sequence is an M x D token tensor; M patches, hidden width D.
using PatchSequence = Tensor;

struct ModelShape {
  int layers = 0;
  int hidden = 0;
  int heads = 0;
  int mlp = 0;
  int patch = 0;

  void validate(int image_h, int image_w, const std::string& what) const;
  int patch_count(int image_h, int image_w) const { return (image_h / patch) * (image_w / patch); }
};

// Ordered named parameter registry; ordering defines checkpoint layout and
// optimizer slot assignment, so collection order must be deterministic.
struct NamedParams {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(const std::string& name, const Tensor& t);
  std::vector<Tensor> tensors() const;
  int64_t total_elems() const;
};

struct EmbedParams {
  Tensor w_proj;  // patch_dim x D
  Tensor e_pos;   // M x D
};

EmbedParams init_embed(int patch_dim, int patch_count, int hidden, Rng& rng);
// tokens = patches * w_proj + e_pos
PatchSequence embed(Tape& tape, const Tensor& patches, const EmbedParams& p);

struct AttnParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor wb;  // bias projection; defined only for biased attention
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  AttnParams attn;
  Tensor ln2_g, ln2_b;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;
};

struct EncoderParams {
  ModelShape shape;
  bool biased = false;
  std::vector<BlockParams> blocks;
};

EncoderParams init_encoder(const ModelShape& shape, bool biased, Rng& rng);
void collect_encoder(const EncoderParams& enc, const std::string& prefix, NamedParams& out);

// Standard per-head attention: Softmax(Q K^T / sqrt(d)) V, heads concatenated
// then output-projected. attn_rows, when given, receives each head's softmax
// matrix.
PatchSequence msa_standard(Tape& tape, const PatchSequence& tokens, const AttnParams& p, int heads,
                           std::vector<Tensor>* attn_rows = nullptr);

// Attention with an additive logit bias derived from the second token stream:
// B = (E' Wb)(E' Wb)^T, applied before scaling, shared across heads.
PatchSequence msa_biased(Tape& tape, const PatchSequence& tokens, const PatchSequence& gb_tokens,
                         const AttnParams& p, int heads, std::vector<Tensor>* attn_rows = nullptr);

// Pre-norm transformer stack. When enc.biased, gb_tokens must be supplied and
// every block derives its own bias projection from them.
PatchSequence encoder_forward(Tape& tape, const PatchSequence& tokens, const EncoderParams& enc,
                              const PatchSequence* gb_tokens = nullptr,
                              std::vector<Tensor>* attn_rows = nullptr);

// Global average pooling over the token axis; returns a rank-1 D vector.
Tensor gap(Tape& tape, const PatchSequence& tokens);

struct MlpHead {
  Tensor w1, b1, w2, b2;
};

MlpHead init_head(int in_dim, int hidden, int out_dim, Rng& rng);
void collect_head(const MlpHead& head, const std::string& prefix, NamedParams& out);
Tensor head_forward(Tape& tape, const Tensor& z, const MlpHead& head);  // rank-1 logits

// Differentiable classifier surface used by attack generation and
// guided-backprop saliency.
class DiffModel {
 public:
  virtual ~DiffModel() = default;
  virtual int num_classes() const = 0;
  // image is H x W x C; returns rank-1 logits.
  virtual Tensor forward(Tape& tape, const Tensor& image) const = 0;
};

// Plain ViT classifier: patchify, embed, standard encoder, GAP, MLP head.
// Serves as the fixed saliency probe and the non-adversarial baseline.
class ViTClassifier final : public DiffModel {
 public:
  int image_h = 0, image_w = 0, image_c = 0, classes = 2;
  ModelShape shape;
  EmbedParams embed_p;
  EncoderParams enc;
  MlpHead head;

  static ViTClassifier make(int image_h, int image_w, int image_c, int classes, const ModelShape& shape,
                            int head_hidden, Rng& rng);

  int num_classes() const override { return classes; }
  Tensor forward(Tape& tape, const Tensor& image) const override;
  void collect(const std::string& prefix, NamedParams& out) const;
};

}  // namespace rvit
