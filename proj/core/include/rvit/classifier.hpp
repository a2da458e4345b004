#pragma once

#include <optional>

#include "rvit/detector.hpp"
#include "rvit/vit.hpp"

namespace rvit {

// Per-patch visibility with an exact visible count of round(M * (1 - ratio)).
struct MaskSpec {
  std::vector<uint8_t> visible;
  float ratio = 0.0f;

  int size() const { return static_cast<int>(visible.size()); }
  int visible_count() const;
  std::vector<int> visible_rows() const;
  std::vector<int> masked_rows() const;
};

MaskSpec sample_mask(int patch_count, float ratio, Rng& rng);
MaskSpec all_visible_mask(int patch_count);

struct EncoderStream {
  EmbedParams embed_p;
  EncoderParams enc;
};

struct DecoderParams {
  Tensor proj_w, proj_b;  // encoder width -> decoder width
  Tensor pos;             // M x decoder width
  EncoderParams enc;
  Tensor out_w, out_b;    // decoder width -> patch pixels
};

enum class RecTarget { masked, all };

class ClassifierModel {
 public:
  int image_h = 0, image_w = 0, image_c = 0, classes = 0;
  ModelShape enc_shape, dec_shape;
  int head_hidden = 0;
  EncoderStream clean_enc, adv_enc;
  Tensor mask_token;  // 1 x encoder width, shared by both streams
  DecoderParams decoder;
  MlpHead head;

  static ClassifierModel make(int image_h, int image_w, int image_c, int classes, const ModelShape& enc_shape,
                              const ModelShape& dec_shape, int head_hidden, Rng& rng);

  int patch_count() const { return enc_shape.patch_count(image_h, image_w); }
  void collect(const std::string& prefix, NamedParams& out) const;
  void collect_frozen(const std::string& prefix, NamedParams& out) const;  // everything but the head
};

// Encode the visible patches, then reinsert the shared mask token at masked
// positions; output always has M rows.
PatchSequence masked_encode(Tape& tape, const Tensor& image, const MaskSpec& mask, const EncoderStream& stream,
                            const Tensor& mask_token);

// Decoder over the full token set; returns the reconstructed image.
Tensor decode(Tape& tape, const PatchSequence& tokens, const DecoderParams& dec, int image_h, int image_w,
              int image_c);

// MSE over the pixels of masked patches (or all patches).
Tensor reconstruction_loss(Tape& tape, const Tensor& target_image, const Tensor& recon_image,
                           const MaskSpec& mask, int patch, RecTarget which = RecTarget::masked);

// SimCLR-form contrastive loss at temperature tau; rows 0..B-1 are clean
// representations, rows B..2B-1 their adversarial counterparts in order.
Tensor contrastive_loss(Tape& tape, const Tensor& z, float tau);

struct EnsembleRep {
  Tensor z_hat;  // M x D fused representations
  float p_used = 0.0f;
};

// Per-patch fusion of the two streams weighted by the detector's clean
// probability, normalized by the active weight mass (guarded at 1e-12).
EnsembleRep adaptive_ensemble(Tape& tape, const Tensor& z_cln, const Tensor& z_adv, const MaskSpec& m_cln,
                              const MaskSpec& m_adv, float p);

struct PretrainItem {
  Tensor x_cln;
  Tensor x_adv;
  MaskSpec mask;  // shared between the pair
};

struct PretrainParts {
  double rec_cln = 0.0;
  double rec_adv = 0.0;
  double cl = 0.0;
};

// (1 - omega) * (rec_cln + rec_adv) / 2 + omega * contrastive, over a batch.
Tensor pretrain_loss(Tape& tape, const ClassifierModel& model, const std::vector<PretrainItem>& batch,
                     float omega, float tau, RecTarget rec_target, PretrainParts* parts = nullptr);

// Dual masked encode, adaptive ensemble at the given p, GAP, MLP head.
Tensor finetune_forward(Tape& tape, const ClassifierModel& model, const Tensor& image, float p,
                        const MaskSpec& m1, const MaskSpec& m2, EnsembleRep* rep_out = nullptr);

// The classifier's unmasked clean path (clean encoder + head); serves as the
// guided-backprop source once the head exists.
class CleanPathModel final : public DiffModel {
 public:
  explicit CleanPathModel(const ClassifierModel& model) : model_(&model) {}
  int num_classes() const override { return model_->classes; }
  Tensor forward(Tape& tape, const Tensor& image) const override;

 private:
  const ClassifierModel* model_;
};

// Full defended classifier as a differentiable surface for attack
// generation: fixed masks, detector probability treated as a constant
// (recomputed from the current input each forward).
class EnsembleClassifier final : public DiffModel {
 public:
  EnsembleClassifier(const ClassifierModel& cls, const DetectorModel& det, const DiffModel& gb_source,
                     MaskSpec m1, MaskSpec m2, std::optional<float> fixed_p = std::nullopt);

  int num_classes() const override { return cls_->classes; }
  Tensor forward(Tape& tape, const Tensor& image) const override;

  // Observation hook for ensemble factors actually applied.
  std::vector<float>* p_log = nullptr;

 private:
  const ClassifierModel* cls_;
  const DetectorModel* det_;
  const DiffModel* gb_;
  MaskSpec m1_, m2_;
  std::optional<float> fixed_p_;
};

}  // namespace rvit
