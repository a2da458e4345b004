#include "rvit/detector.hpp"

#include <cmath>

namespace rvit {

DetectorModel DetectorModel::make(int image_h, int image_w, int image_c, const ModelShape& shape,
                                  int head_hidden, Rng& rng) {
  shape.validate(image_h, image_w, "detector");
  DetectorModel m;
  m.image_h = image_h;
  m.image_w = image_w;
  m.image_c = image_c;
  m.shape = shape;
  m.head_hidden = head_hidden;
  const int patch_dim = shape.patch * shape.patch * image_c;
  m.embed_x = init_embed(patch_dim, shape.patch_count(image_h, image_w), shape.hidden, rng);
  m.w_proj_gb = Tensor({patch_dim, shape.hidden});
  for (auto& v : m.w_proj_gb.vec()) v = rng.trunc_normal(0.02f);
  m.enc = init_encoder(shape, /*biased=*/true, rng);
  m.head = init_head(shape.hidden, head_hidden, 2, rng);
  return m;
}

void DetectorModel::collect(const std::string& prefix, NamedParams& out) const {
  out.add(prefix + ".embed.w_proj", embed_x.w_proj);
  out.add(prefix + ".embed.e_pos", embed_x.e_pos);
  out.add(prefix + ".embed.w_proj_gb", w_proj_gb);
  collect_encoder(enc, prefix + ".enc", out);
  collect_head(head, prefix + ".head", out);
}

DetectorOutput detector_forward(Tape& tape, const DetectorModel& model, const Tensor& image,
                                const DiffModel& gb_source, const Tensor* precomputed_gb) {
  DetectorOutput out;

  Tensor patches = tape.patchify(image, model.shape.patch);
  Tensor tokens = embed(tape, patches, model.embed_x);

  Tensor gb_tokens;
  if (model.use_gb) {
    Tensor x_prime;
    if (precomputed_gb != nullptr) {
      x_prime = *precomputed_gb;
    } else {
      SaliencyResult sal = guided_backprop(gb_source, image);
      x_prime = sal.x_prime;
      out.gb_degenerate = sal.degenerate;
    }
    Tensor gb_patches = tape.patchify(x_prime, model.shape.patch);
    gb_tokens = tape.add(tape.matmul(gb_patches, model.w_proj_gb), model.embed_x.e_pos);
  }

  EncoderParams enc = model.enc;
  enc.biased = model.use_gb && model.use_bias;
  Tensor encoded = enc.biased ? encoder_forward(tape, tokens, enc, &gb_tokens)
                              : encoder_forward(tape, tokens, enc);
  out.z = gap(tape, encoded);
  out.logits = head_forward(tape, out.z, model.head);

  const double l0 = out.logits.data()[0];
  const double l1 = out.logits.data()[1];
  const double mx = std::max(l0, l1);
  const double e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
  out.p = static_cast<float>(e1 / (e0 + e1));
  return out;
}

Tensor snn_loss(Tape& tape, const Tensor& z, const std::vector<int>& y_det, float tau, SnnInfo* info) {
  if (z.ndim() != 2) throw ShapeError(cat("snn_loss: expected 2B x D representations, got ", shape_str(z.shape())));
  const int n = z.dim(0);
  const int d = z.dim(1);
  if (static_cast<int>(y_det.size()) != n) {
    throw ShapeError(cat("snn_loss: ", y_det.size(), " labels for ", n, " rows"));
  }
  if (n < 2) throw ShapeError("snn_loss: need at least two samples");
  if (tau <= 0.0f) throw ValueError("snn_loss: tau must be positive");

  // Cosine similarity matrix built from the Gram matrix and row norms.
  Tensor gram = tape.matmul(z, tape.transpose(z));
  Tensor row_sq = tape.matmul(tape.mul(z, z), Tensor::full({d, 1}, 1.0f));
  Tensor norms = tape.sqrt(tape.add(row_sq, Tensor::full({n, 1}, 1e-12f)));
  Tensor norm_outer = tape.matmul(norms, tape.transpose(norms));
  Tensor cos = tape.div(gram, norm_outer);

  // dist = 1 - cos; weights = exp(-dist / tau)
  Tensor dist = tape.sub(Tensor::full({n, n}, 1.0f), cos);
  Tensor weights = tape.exp(tape.scale(dist, -1.0f / tau));

  Tensor same_mask({n, n});
  Tensor offdiag_mask({n, n});
  std::vector<float> anchor_mask(static_cast<size_t>(n), 0.0f);
  std::vector<float> anchor_pad(static_cast<size_t>(n), 0.0f);
  int used = 0;
  for (int i = 0; i < n; ++i) {
    int same_count = 0;
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      offdiag_mask.data()[i * n + j] = 1.0f;
      if (y_det[static_cast<size_t>(i)] == y_det[static_cast<size_t>(j)]) {
        same_mask.data()[i * n + j] = 1.0f;
        ++same_count;
      }
    }
    if (same_count > 0) {
      anchor_mask[static_cast<size_t>(i)] = 1.0f;
      ++used;
    } else {
      anchor_pad[static_cast<size_t>(i)] = 1.0f;  // keeps log() off zero for skipped anchors
    }
  }
  if (info != nullptr) {
    info->used_anchors = used;
    info->skipped_anchors = n - used;
  }
  if (used == 0) throw ValueError("snn_loss: every anchor lacks a positive pair");

  Tensor ones_col = Tensor::full({n, 1}, 1.0f);
  Tensor pos_sum = tape.add(tape.matmul(tape.mul(weights, same_mask), ones_col),
                            Tensor({n, 1}, anchor_pad));
  Tensor all_sum = tape.matmul(tape.mul(weights, offdiag_mask), ones_col);
  Tensor per_anchor = tape.sub(tape.log(pos_sum), tape.log(all_sum));
  Tensor masked = tape.mul(per_anchor, Tensor({n, 1}, anchor_mask));
  return tape.scale(tape.sum(masked), -1.0f / static_cast<float>(used));
}

Tensor detector_loss(Tape& tape, const Tensor& logits, const std::vector<int>& y_det, const Tensor& z,
                     float lambda, float tau, DetectorLossParts* parts) {
  if (lambda < 0.0f || lambda > 1.0f) throw ValueError(cat("detector_loss: lambda ", lambda, " outside [0,1]"));
  std::vector<int> classes;
  classes.reserve(y_det.size());
  for (int y : y_det) classes.push_back(det_label_to_class(y));
  Tensor ce = tape.cross_entropy_logits(logits, classes);
  Tensor snn = snn_loss(tape, z, y_det, tau);
  if (parts != nullptr) {
    parts->ce = ce.scalar();
    parts->snn = snn.scalar();
  }
  return tape.add(tape.scale(ce, 1.0f - lambda), tape.scale(snn, lambda));
}

}  // namespace rvit
