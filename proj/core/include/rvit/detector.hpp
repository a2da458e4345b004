#pragma once

#include "rvit/saliency.hpp"
#include "rvit/vit.hpp"

namespace rvit {

// Detector verdict for one image: p is the estimated probability that the
// input is clean; z the pooled pre-head representation.
struct DetectorOutput {
  Tensor logits;  // rank-1, 2 entries: [adversarial, clean]
  Tensor z;       // rank-1 D
  float p = 0.0f;
  bool gb_degenerate = false;
};

// Detection labels are +1 (clean) / -1 (adversarial); they map onto
// cross-entropy classes 1 and 0 respectively.
inline int det_label_to_class(int y_det) { return y_det > 0 ? 1 : 0; }

class DetectorModel {
 public:
  int image_h = 0, image_w = 0, image_c = 0;
  ModelShape shape;
  int head_hidden = 0;
  EmbedParams embed_x;   // e_pos shared with the saliency stream
  Tensor w_proj_gb;      // projection for the guided-backprop variant
  EncoderParams enc;     // biased attention blocks
  MlpHead head;
  bool use_gb = true;    // ablation: drop the saliency stream entirely
  bool use_bias = true;  // ablation: zero attention bias

  static DetectorModel make(int image_h, int image_w, int image_c, const ModelShape& shape, int head_hidden,
                            Rng& rng);
  void collect(const std::string& prefix, NamedParams& out) const;
};

// Two-stream forward: the image and its guided-backprop variant are
// patchified and embedded, run through the bias-augmented encoder, pooled,
// and scored by a binary head. A precomputed variant skips the saliency pass.
DetectorOutput detector_forward(Tape& tape, const DetectorModel& model, const Tensor& image,
                                const DiffModel& gb_source, const Tensor* precomputed_gb = nullptr);

struct SnnInfo {
  int skipped_anchors = 0;
  int used_anchors = 0;
};

// Soft-nearest-neighbor loss over pooled representations; positives share the
// detection label, distances are cosine. Anchors whose class has no other
// member are skipped and flagged.
Tensor snn_loss(Tape& tape, const Tensor& z, const std::vector<int>& y_det, float tau,
                SnnInfo* info = nullptr);

struct DetectorLossParts {
  double ce = 0.0;
  double snn = 0.0;
};

// (1 - lambda) * CE + lambda * SNN.
Tensor detector_loss(Tape& tape, const Tensor& logits, const std::vector<int>& y_det, const Tensor& z,
                     float lambda, float tau, DetectorLossParts* parts = nullptr);

}  // namespace rvit
