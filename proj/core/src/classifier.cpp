#include "rvit/classifier.hpp"

#include <algorithm>
#include <cmath>

namespace rvit {

int MaskSpec::visible_count() const {
  int n = 0;
  for (uint8_t v : visible) n += v ? 1 : 0;
  return n;
}

std::vector<int> MaskSpec::visible_rows() const {
  std::vector<int> out;
  for (size_t i = 0; i < visible.size(); ++i)
    if (visible[i]) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> MaskSpec::masked_rows() const {
  std::vector<int> out;
  for (size_t i = 0; i < visible.size(); ++i)
    if (!visible[i]) out.push_back(static_cast<int>(i));
  return out;
}

MaskSpec sample_mask(int patch_count, float ratio, Rng& rng) {
  if (patch_count <= 0) throw ValueError("sample_mask: patch count must be positive");
  if (ratio < 0.0f || ratio >= 1.0f) throw ValueError(cat("sample_mask: ratio ", ratio, " outside [0,1)"));
  const int keep = static_cast<int>(std::lround(static_cast<double>(patch_count) * (1.0 - ratio)));
  std::vector<int> order(static_cast<size_t>(patch_count));
  for (int i = 0; i < patch_count; ++i) order[static_cast<size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng.engine());
  MaskSpec m;
  m.ratio = ratio;
  m.visible.assign(static_cast<size_t>(patch_count), 0);
  for (int i = 0; i < keep; ++i) m.visible[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
  return m;
}

MaskSpec all_visible_mask(int patch_count) {
  MaskSpec m;
  m.ratio = 0.0f;
  m.visible.assign(static_cast<size_t>(patch_count), 1);
  return m;
}

ClassifierModel ClassifierModel::make(int image_h, int image_w, int image_c, int classes,
                                      const ModelShape& enc_shape, const ModelShape& dec_shape,
                                      int head_hidden, Rng& rng) {
  enc_shape.validate(image_h, image_w, "classifier encoder");
  dec_shape.validate(image_h, image_w, "classifier decoder");
  if (enc_shape.patch != dec_shape.patch) throw ConfigError("classifier: encoder/decoder patch sizes differ");

  ClassifierModel m;
  m.image_h = image_h;
  m.image_w = image_w;
  m.image_c = image_c;
  m.classes = classes;
  m.enc_shape = enc_shape;
  m.dec_shape = dec_shape;
  m.head_hidden = head_hidden;

  const int patch_dim = enc_shape.patch * enc_shape.patch * image_c;
  const int patches = enc_shape.patch_count(image_h, image_w);

  m.clean_enc.embed_p = init_embed(patch_dim, patches, enc_shape.hidden, rng);
  m.clean_enc.enc = init_encoder(enc_shape, false, rng);
  m.adv_enc.embed_p = init_embed(patch_dim, patches, enc_shape.hidden, rng);
  m.adv_enc.enc = init_encoder(enc_shape, false, rng);

  m.mask_token = Tensor({1, enc_shape.hidden});
  for (auto& v : m.mask_token.vec()) v = rng.trunc_normal(0.02f);

  m.decoder.proj_w = Tensor({enc_shape.hidden, dec_shape.hidden});
  for (auto& v : m.decoder.proj_w.vec()) v = rng.trunc_normal(0.02f);
  m.decoder.proj_b = Tensor::zeros({dec_shape.hidden});
  m.decoder.pos = Tensor({patches, dec_shape.hidden});
  for (auto& v : m.decoder.pos.vec()) v = rng.trunc_normal(0.02f);
  m.decoder.enc = init_encoder(dec_shape, false, rng);
  m.decoder.out_w = Tensor({dec_shape.hidden, patch_dim});
  for (auto& v : m.decoder.out_w.vec()) v = rng.trunc_normal(0.02f);
  m.decoder.out_b = Tensor::zeros({patch_dim});

  m.head = init_head(enc_shape.hidden, head_hidden, classes, rng);
  return m;
}

void ClassifierModel::collect_frozen(const std::string& prefix, NamedParams& out) const {
  out.add(prefix + ".clean.embed.w_proj", clean_enc.embed_p.w_proj);
  out.add(prefix + ".clean.embed.e_pos", clean_enc.embed_p.e_pos);
  collect_encoder(clean_enc.enc, prefix + ".clean.enc", out);
  out.add(prefix + ".adv.embed.w_proj", adv_enc.embed_p.w_proj);
  out.add(prefix + ".adv.embed.e_pos", adv_enc.embed_p.e_pos);
  collect_encoder(adv_enc.enc, prefix + ".adv.enc", out);
  out.add(prefix + ".mask_token", mask_token);
  out.add(prefix + ".decoder.proj_w", decoder.proj_w);
  out.add(prefix + ".decoder.proj_b", decoder.proj_b);
  out.add(prefix + ".decoder.pos", decoder.pos);
  collect_encoder(decoder.enc, prefix + ".decoder.enc", out);
  out.add(prefix + ".decoder.out_w", decoder.out_w);
  out.add(prefix + ".decoder.out_b", decoder.out_b);
}

void ClassifierModel::collect(const std::string& prefix, NamedParams& out) const {
  collect_frozen(prefix, out);
  collect_head(head, prefix + ".head", out);
}

PatchSequence masked_encode(Tape& tape, const Tensor& image, const MaskSpec& mask, const EncoderStream& stream,
                            const Tensor& mask_token) {
  Tensor patches = tape.patchify(image, stream.enc.shape.patch);
  const int m = patches.dim(0);
  if (mask.size() != m) {
    throw ShapeError(cat("masked_encode: mask covers ", mask.size(), " patches, image has ", m));
  }
  Tensor tokens = embed(tape, patches, stream.embed_p);

  const std::vector<int> vis = mask.visible_rows();
  if (vis.empty()) throw ValueError("masked_encode: no visible patches");
  if (static_cast<int>(vis.size()) == m) return encoder_forward(tape, tokens, stream.enc);

  Tensor visible = tape.gather(tokens, vis);
  Tensor encoded = encoder_forward(tape, visible, stream.enc);

  const std::vector<int> hidden = mask.masked_rows();
  Tensor tiled = tape.matmul(Tensor::full({static_cast<int>(hidden.size()), 1}, 1.0f), mask_token);
  Tensor stacked = tape.concat({encoded, tiled}, 0);

  // Row i of the output comes from its position in the stacked tensor.
  std::vector<int> placement(static_cast<size_t>(m), 0);
  for (size_t i = 0; i < vis.size(); ++i) placement[static_cast<size_t>(vis[i])] = static_cast<int>(i);
  for (size_t i = 0; i < hidden.size(); ++i) {
    placement[static_cast<size_t>(hidden[i])] = static_cast<int>(vis.size() + i);
  }
  return tape.gather(stacked, placement);
}

Tensor decode(Tape& tape, const PatchSequence& tokens, const DecoderParams& dec, int image_h, int image_w,
              int image_c) {
  Tensor x = tape.add(tape.add(tape.matmul(tokens, dec.proj_w), dec.proj_b), dec.pos);
  x = encoder_forward(tape, x, dec.enc);
  Tensor patches = tape.add(tape.matmul(x, dec.out_w), dec.out_b);
  return tape.unpatchify(patches, image_h, image_w, image_c, dec.enc.shape.patch);
}

Tensor reconstruction_loss(Tape& tape, const Tensor& target_image, const Tensor& recon_image,
                           const MaskSpec& mask, int patch, RecTarget which) {
  Tensor target_p = tape.patchify(target_image, patch);
  Tensor recon_p = tape.patchify(recon_image, patch);
  if (mask.size() != target_p.dim(0)) {
    throw ShapeError(cat("reconstruction_loss: mask covers ", mask.size(), " patches, image has ",
                         target_p.dim(0)));
  }
  if (which == RecTarget::all) return tape.mse(recon_p, target_p);
  const std::vector<int> rows = mask.masked_rows();
  if (rows.empty()) return tape.mse(recon_p, target_p);  // nothing masked: degenerate to full MSE
  return tape.mse(tape.gather(recon_p, rows), tape.gather(target_p, rows));
}

Tensor contrastive_loss(Tape& tape, const Tensor& z, float tau) {
  if (z.ndim() != 2) throw ShapeError(cat("contrastive_loss: expected 2B x D, got ", shape_str(z.shape())));
  const int n = z.dim(0);
  if (n % 2 != 0) throw ShapeError(cat("contrastive_loss: odd row count ", n));
  const int b = n / 2;
  if (b < 2) throw ValueError("contrastive_loss: need B >= 2 for negatives");
  if (tau <= 0.0f) throw ValueError("contrastive_loss: tau must be positive");
  const int d = z.dim(1);

  Tensor gram = tape.matmul(z, tape.transpose(z));
  Tensor row_sq = tape.matmul(tape.mul(z, z), Tensor::full({d, 1}, 1.0f));
  Tensor norms = tape.sqrt(tape.add(row_sq, Tensor::full({n, 1}, 1e-12f)));
  Tensor cos = tape.div(gram, tape.matmul(norms, tape.transpose(norms)));
  Tensor sims = tape.exp(tape.scale(cos, 1.0f / tau));

  Tensor offdiag({n, n});
  Tensor pair({n, n});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j)
      if (i != j) offdiag.data()[i * n + j] = 1.0f;
    const int partner = i < b ? i + b : i - b;
    pair.data()[i * n + partner] = 1.0f;
  }

  Tensor ones_col = Tensor::full({n, 1}, 1.0f);
  Tensor pos = tape.matmul(tape.mul(sims, pair), ones_col);
  Tensor den = tape.matmul(tape.mul(sims, offdiag), ones_col);
  Tensor losses = tape.sub(tape.log(den), tape.log(pos));
  return tape.scale(tape.sum(losses), 1.0f / static_cast<float>(n));
}

EnsembleRep adaptive_ensemble(Tape& tape, const Tensor& z_cln, const Tensor& z_adv, const MaskSpec& m_cln,
                              const MaskSpec& m_adv, float p) {
  if (z_cln.shape() != z_adv.shape()) {
    throw ShapeError(cat("adaptive_ensemble: stream shapes differ: ", shape_str(z_cln.shape()), " vs ",
                         shape_str(z_adv.shape())));
  }
  if (p < 0.0f || p > 1.0f) throw ValueError(cat("adaptive_ensemble: p ", p, " outside [0,1]"));
  const int m = z_cln.dim(0);
  if (m_cln.size() != m || m_adv.size() != m) {
    throw ShapeError("adaptive_ensemble: mask lengths do not match patch count");
  }

  Tensor coeff_cln({m, m});
  Tensor coeff_adv({m, m});
  for (int i = 0; i < m; ++i) {
    const double a = static_cast<double>(p) * (m_cln.visible[static_cast<size_t>(i)] ? 1.0 : 0.0);
    const double bweight = (1.0 - static_cast<double>(p)) * (m_adv.visible[static_cast<size_t>(i)] ? 1.0 : 0.0);
    const double den = std::max(a + bweight, 1e-12);
    coeff_cln.data()[i * m + i] = static_cast<float>(a / den);
    coeff_adv.data()[i * m + i] = static_cast<float>(bweight / den);
  }
  EnsembleRep rep;
  rep.p_used = p;
  rep.z_hat = tape.add(tape.matmul(coeff_cln, z_cln), tape.matmul(coeff_adv, z_adv));
  return rep;
}

Tensor pretrain_loss(Tape& tape, const ClassifierModel& model, const std::vector<PretrainItem>& batch,
                     float omega, float tau, RecTarget rec_target, PretrainParts* parts) {
  if (batch.empty()) throw ValueError("pretrain_loss: empty batch");
  if (omega < 0.0f || omega > 1.0f) throw ValueError(cat("pretrain_loss: omega ", omega, " outside [0,1]"));

  std::vector<Tensor> rec_terms_cln, rec_terms_adv, z_cln_rows, z_adv_rows;
  for (const PretrainItem& item : batch) {
    PatchSequence t_cln = masked_encode(tape, item.x_cln, item.mask, model.clean_enc, model.mask_token);
    PatchSequence t_adv = masked_encode(tape, item.x_adv, item.mask, model.adv_enc, model.mask_token);
    z_cln_rows.push_back(tape.reshape(gap(tape, t_cln), {1, model.enc_shape.hidden}));
    z_adv_rows.push_back(tape.reshape(gap(tape, t_adv), {1, model.enc_shape.hidden}));
    Tensor rec_cln = decode(tape, t_cln, model.decoder, model.image_h, model.image_w, model.image_c);
    Tensor rec_adv = decode(tape, t_adv, model.decoder, model.image_h, model.image_w, model.image_c);
    rec_terms_cln.push_back(
        reconstruction_loss(tape, item.x_cln, rec_cln, item.mask, model.enc_shape.patch, rec_target));
    rec_terms_adv.push_back(
        reconstruction_loss(tape, item.x_adv, rec_adv, item.mask, model.enc_shape.patch, rec_target));
  }

  Tensor rec_cln_mean = tape.mean(tape.concat(rec_terms_cln, 0));
  Tensor rec_adv_mean = tape.mean(tape.concat(rec_terms_adv, 0));

  std::vector<Tensor> all_rows = z_cln_rows;
  all_rows.insert(all_rows.end(), z_adv_rows.begin(), z_adv_rows.end());
  Tensor z_all = tape.concat(all_rows, 0);
  Tensor cl = contrastive_loss(tape, z_all, tau);

  if (parts != nullptr) {
    parts->rec_cln = rec_cln_mean.scalar();
    parts->rec_adv = rec_adv_mean.scalar();
    parts->cl = cl.scalar();
  }
  Tensor rec_pair = tape.scale(tape.add(rec_cln_mean, rec_adv_mean), 0.5f);
  return tape.add(tape.scale(rec_pair, 1.0f - omega), tape.scale(cl, omega));
}

Tensor finetune_forward(Tape& tape, const ClassifierModel& model, const Tensor& image, float p,
                        const MaskSpec& m1, const MaskSpec& m2, EnsembleRep* rep_out) {
  PatchSequence z1 = masked_encode(tape, image, m1, model.clean_enc, model.mask_token);
  PatchSequence z2 = masked_encode(tape, image, m2, model.adv_enc, model.mask_token);
  EnsembleRep rep = adaptive_ensemble(tape, z1, z2, m1, m2, p);
  if (rep_out != nullptr) *rep_out = rep;
  return head_forward(tape, gap(tape, rep.z_hat), model.head);
}

Tensor CleanPathModel::forward(Tape& tape, const Tensor& image) const {
  Tensor patches = tape.patchify(image, model_->enc_shape.patch);
  Tensor tokens = embed(tape, patches, model_->clean_enc.embed_p);
  Tensor encoded = encoder_forward(tape, tokens, model_->clean_enc.enc);
  return head_forward(tape, gap(tape, encoded), model_->head);
}

EnsembleClassifier::EnsembleClassifier(const ClassifierModel& cls, const DetectorModel& det,
                                       const DiffModel& gb_source, MaskSpec m1, MaskSpec m2,
                                       std::optional<float> fixed_p)
    : cls_(&cls), det_(&det), gb_(&gb_source), m1_(std::move(m1)), m2_(std::move(m2)), fixed_p_(fixed_p) {}

Tensor EnsembleClassifier::forward(Tape& tape, const Tensor& image) const {
  float p;
  if (fixed_p_.has_value()) {
    p = *fixed_p_;
  } else {
    Tape det_tape;  // detector factor is a constant for this surface
    DetectorOutput det_out = detector_forward(det_tape, *det_, image, *gb_);
    p = det_out.p;
  }
  if (p_log != nullptr) p_log->push_back(p);
  return finetune_forward(tape, *cls_, image, p, m1_, m2_);
}

}  // namespace rvit
