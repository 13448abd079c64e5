#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pargan/data.hpp"
#include "pargan/model.hpp"
#include "pargan/nn.hpp"
#include "pargan/parallel.hpp"

namespace pargan {

struct LossWeights {
  double lambda_cyc = 10.0;
  double lambda_id = 1.25;
  double gp_coeff = 10.0;

  void validate() const {
    if (!(lambda_cyc >= 0 && lambda_id >= 0 && gp_coeff >= 0)) {
      throw ParameterError("loss weights must be non-negative");
    }
  }
};

/// kParGan conditions on each image's realness. kConstant feeds p = 1 for
/// every image, so the condition carries nothing (the no-parameter ablation).
/// kDomain feeds 0 for source and 1 for target images.
enum class PMode { kParGan, kConstant, kDomain };

inline std::string p_mode_name(PMode m) {
  switch (m) {
    case PMode::kParGan: return "pargan";
    case PMode::kConstant: return "constant";
    case PMode::kDomain: return "domain";
  }
  return "?";
}

inline PMode parse_p_mode(const std::string& s) {
  for (auto m : {PMode::kParGan, PMode::kConstant, PMode::kDomain}) {
    if (s == p_mode_name(m)) return m;
  }
  throw ParameterError("unknown p_mode '" + s + "' (pargan, constant, domain)");
}

struct TrainConfig {
  std::int64_t steps = 2000;
  std::int64_t critic_updates = 5;
  std::int64_t crop = 32;
  std::int64_t batch = 1;
  nn::AdamConfig optimizer;         // generators: lr 1e-4, betas (0.5, 0.9)
  nn::AdamConfig critic_optimizer;  // critics
  std::uint64_t seed = 0;
  PMode p_mode = PMode::kParGan;
  LossWeights weights;
  GeneratorSpec generator{8, 3, 2};
  CriticSpec critic{8, 2};
  // Written every `checkpoint_every` steps and on abort when non-empty.
  std::string checkpoint_path;
  std::int64_t checkpoint_every = 0;

  void validate() const {
    weights.validate();
    if (steps <= 0) throw ParameterError("steps must be positive");
    if (critic_updates < 0) throw ParameterError("critic_updates must be non-negative");
    if (batch < 1) throw ParameterError("batch must be positive");
    if (crop % generator.divisor() != 0 || crop % critic.divisor() != 0) {
      throw ParameterError("crop " + std::to_string(crop) + " must be divisible by " +
                           std::to_string(std::max(generator.divisor(), critic.divisor())));
    }
    if (!(optimizer.lr > 0 && critic_optimizer.lr > 0)) throw ParameterError("learning rate must be positive");
  }
};

/// One generator step: the five addends of the objective, the critic terms of
/// the last critic update before it, and the weighted total.
struct StepRecord {
  std::int64_t step = 0;
  double critic_fwd = 0, gen_fwd = 0, critic_inv = 0, gen_inv = 0;
  double cyc = 0, id_fwd = 0, id_inv = 0;
  double gp_fwd = 0, gp_inv = 0;
  double total = 0;
  // mean D(real) - mean D(fake) for each critic.
  double wasserstein_fwd = 0, wasserstein_inv = 0;

  bool finite() const {
    for (double v : {critic_fwd, gen_fwd, critic_inv, gen_inv, cyc, id_fwd, id_inv, gp_fwd, gp_inv, total}) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

inline constexpr const char* kLossCsvHeader = "step,critic_fwd,gen_fwd,critic_inv,gen_inv,cyc,id_fwd,id_inv,gp_fwd,gp_inv,total";

inline std::string loss_csv_row(const StepRecord& r) {
  std::string out = std::to_string(r.step);
  for (double v : {r.critic_fwd, r.gen_fwd, r.critic_inv, r.gen_inv, r.cyc, r.id_fwd, r.id_inv, r.gp_fwd, r.gp_inv, r.total}) {
    out += "," + detail::format_number(v);
  }
  return out;
}

inline std::string format_loss_csv(const std::vector<StepRecord>& log) {
  std::string out = std::string(kLossCsvHeader) + "\n";
  for (const auto& r : log) out += loss_csv_row(r) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Objective components. Critics and generators are any callables
// (const Tensor<T>&, double p) -> Tensor<T>, so closed-form stand-ins work too.

template <typename T>
struct CriticTerms {
  Tensor<T> loss;         // mean D(fake) - mean D(real) + gp_coeff * gp
  Tensor<T> gp;           // batch mean of (|grad_xhat D| - 1)^2
  Tensor<T> wasserstein;  // mean D(real) - mean D(fake)
};

template <typename T>
struct GanTerms {
  CriticTerms<T> critic;
  Tensor<T> gen;  // -mean D(fake)
};

/// Per-image mixing weights broadcast over N x C x H x W.
template <typename T>
Tensor<T> expand_per_image(const Tensor<T>& eps, const Shape& shape) {
  if (eps.rank() != 1 || eps.dim(0) != shape[0]) {
    throw DimensionError("interpolation weights need one entry per image (" + std::to_string(shape[0]) + ")");
  }
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)));
  const auto per = numel_of(shape) / shape[0];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps[static_cast<std::int64_t>(i) / per];
  return Tensor<T>(shape, std::move(out));
}

/// (|grad D(xhat, p)| - 1)^2 averaged over the batch, at
/// xhat = eps * real + (1 - eps) * fake with one eps per image. The result is
/// differentiable with respect to the critic's parameters.
template <typename T, typename Critic>
Tensor<T> gradient_penalty(const Critic& d, const Tensor<T>& real, const Tensor<T>& fake, const Tensor<T>& eps, double p) {
  if (real.shape() != fake.shape()) {
    throw DimensionError("gradient_penalty: real " + shape_str(real.shape()) + " vs fake " + shape_str(fake.shape()));
  }
  Tensor<T> xhat;
  {
    NoGradGuard<T> off;
    const auto e = expand_per_image(eps, real.shape());
    xhat = add(mul(e, real.detach()), mul(add_scalar(neg(e), 1.0), fake.detach()));
  }
  xhat = xhat.detach();
  xhat.set_requires_grad();
  // The penalty needs grad_xhat even when the caller records nothing; the
  // local tape then yields a value that is not differentiable further.
  std::optional<Tape<T>> local;
  if (!Tape<T>::active()) local.emplace();
  const auto n = real.dim(0);
  const auto scores = d(xhat, p);
  // Sum over images of each image's patch-mean score.
  const auto per_image = scale(mean(scores), static_cast<double>(n));
  const auto g = grad_of_output_wrt_input(per_image, xhat);
  Tensor<T> acc;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto term = square(add_scalar(norm2(slice_batch(g, i)), -1.0));
    acc = i == 0 ? term : add(acc, term);
  }
  return scale(acc, 1.0 / static_cast<double>(n));
}

template <typename T, typename Critic>
CriticTerms<T> critic_terms(const Critic& d, const Tensor<T>& real, const Tensor<T>& fake, const Tensor<T>& eps, double p,
                            double gp_coeff) {
  const auto d_fake = mean(d(fake.detach(), p));
  const auto d_real = mean(d(real, p));
  CriticTerms<T> t;
  t.gp = gradient_penalty<T>(d, real, fake, eps, p);
  t.loss = add(sub(d_fake, d_real), scale(t.gp, gp_coeff));
  NoGradGuard<T> off;
  t.wasserstein = sub(d_real, d_fake);
  return t;
}

/// Forward pair: fake = G(x_s, p) judged against the pooled sample x_st.
template <typename T, typename Critic, typename Gen>
GanTerms<T> loss_gan_forward(const Critic& d, const Gen& g, const Tensor<T>& x_st, double p, const Tensor<T>& x_s,
                             const Tensor<T>& eps, double gp_coeff) {
  const auto fake = g(x_s, p);
  return {critic_terms<T>(d, x_st, fake, eps, p, gp_coeff), neg(mean(d(fake, p)))};
}

/// Inverse pair: fake = G_inv(x_st, p) judged against the source sample x_s.
template <typename T, typename Critic, typename Gen>
GanTerms<T> loss_gan_inverse(const Critic& d_inv, const Gen& g_inv, const Tensor<T>& x_s, const Tensor<T>& x_st, double p,
                             const Tensor<T>& eps, double gp_coeff) {
  const auto fake = g_inv(x_st, p);
  return {critic_terms<T>(d_inv, x_s, fake, eps, p, gp_coeff), neg(mean(d_inv(fake, p)))};
}

template <typename T, typename Gen, typename GenInv>
Tensor<T> loss_cycle(const Gen& g, const GenInv& g_inv, const Tensor<T>& x_s, const Tensor<T>& x_st, double p) {
  const auto back = l1(g_inv(g(x_s, p), p), x_s);
  const auto forth = l1(g(g_inv(x_st, p), p), x_st);
  return scale(add(back, forth), 0.5);
}

/// |G(x_s, p) - x_s|_1 as printed: the forward generator fed a source image.
template <typename T, typename Gen>
Tensor<T> loss_identity(const Gen& g, const Tensor<T>& x_s, double p) {
  return l1(g(x_s, p), x_s);
}

/// |G_inv(x_st, p) - x_st|_1 for a pooled-domain image.
template <typename T, typename GenInv>
Tensor<T> loss_identity_inv(const GenInv& g_inv, const Tensor<T>& x_st, double p) {
  return l1(g_inv(x_st, p), x_st);
}

/// Generator-side objective and its addends. Outputs of G(x_s) and
/// G_inv(x_st) are shared between the adversarial, cycle and identity terms.
template <typename T>
struct GeneratorObjective {
  Tensor<T> total, gen_fwd, gen_inv, cyc, id_fwd, id_inv;
};

template <typename T, typename Gen, typename GenInv, typename Critic, typename CriticInv>
GeneratorObjective<T> total_loss(const Gen& g, const GenInv& g_inv, const Critic& d, const CriticInv& d_inv,
                                 const Tensor<T>& x_s, const Tensor<T>& x_st, double p, const LossWeights& w) {
  w.validate();
  GeneratorObjective<T> o;
  const auto fwd = g(x_s, p);
  const auto inv = g_inv(x_st, p);
  o.gen_fwd = neg(mean(d(fwd, p)));
  o.gen_inv = neg(mean(d_inv(inv, p)));
  o.cyc = scale(add(l1(g_inv(fwd, p), x_s), l1(g(inv, p), x_st)), 0.5);
  o.id_fwd = l1(fwd, x_s);
  o.id_inv = l1(inv, x_st);
  o.total = add(add(add(o.gen_fwd, o.gen_inv), scale(o.cyc, w.lambda_cyc)), scale(add(o.id_fwd, o.id_inv), w.lambda_id));
  return o;
}

// ---------------------------------------------------------------------------
// Training loop

namespace detail {

inline double conditioning_p(const ImageSample& s, PMode mode) {
  if (mode == PMode::kConstant) return 1.0;
  if (mode == PMode::kDomain) return s.domain == Domain::kSource ? 0.0 : 1.0;
  if (!s.p) throw ContractError("train_da: sample '" + s.path + "' has no realness value");
  return *s.p;
}

struct Batch {
  Tensor<float> x_s, x_st;
  double p = 0;
};

template <typename Rng>
Batch draw_batch(const Dataset& source, const Dataset& target, const TrainConfig& cfg, Rng& rng) {
  std::vector<Image> s_imgs, st_imgs;
  double p = 0;
  for (std::int64_t b = 0; b < cfg.batch; ++b) {
    // Pooled sample: each domain with probability 1/2.
    const bool from_target = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    const auto& pool = from_target ? target : source;
    const auto& x = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    const auto& xs = source[std::uniform_int_distribution<std::size_t>(0, source.size() - 1)(rng)];
    // A batch shares the p of its first pooled image.
    if (b == 0) p = conditioning_p(x, cfg.p_mode);
    st_imgs.push_back(crop_random(x, cfg.crop, rng).image);
    s_imgs.push_back(crop_random(xs, cfg.crop, rng).image);
  }
  return {to_tensor<float>(std::span<const Image>(s_imgs)), to_tensor<float>(std::span<const Image>(st_imgs)), p};
}

template <typename Rng>
Tensor<float> draw_eps(std::int64_t n, Rng& rng) {
  return Tensor<float>::uniform({n}, rng, 0.0, 1.0);
}

inline std::vector<std::vector<float>> snapshot(const nn::NamedParams<float>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& [n, t] : params) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

inline void restore(const nn::NamedParams<float>& params, const std::vector<std::vector<float>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].second;
    std::copy(snap[i].begin(), snap[i].end(), t.mutable_data().begin());
  }
}

}  // namespace detail

struct TrainResult {
  ParGanModel<float> model;
  std::vector<StepRecord> log;
  std::int64_t skipped_steps = 0;
};

/// Alternating WGAN-GP optimisation of both GAN pairs. Every step runs
/// `critic_updates` updates of D and D_inv, then one joint update of G and
/// G_inv. One non-finite step is skipped (weights restored); two in a row
/// restore the last good weights, write the checkpoint if configured, and throw.
inline TrainResult train_da(const Dataset& source, const Dataset& target, const TrainConfig& cfg,
                            const std::function<void(const StepRecord&)>& on_step = {}) {
  cfg.validate();
  if (source.empty() || target.empty()) throw DataError("train_da: both datasets must be nonempty");
  if (cfg.p_mode == PMode::kParGan) {
    for (const auto* ds : {&source, &target})
      for (const auto& s : *ds) detail::conditioning_p(s, cfg.p_mode);
  }

  TrainResult res{ParGanModel<float>(cfg.generator, cfg.critic, cfg.seed), {}, 0};
  auto& m = res.model;
  std::mt19937_64 rng(cfg.seed ^ 0xda7aULL);
  const auto gen_params = m.generator_parameters();
  const auto d_params = m.d.parameters("D");
  const auto d_inv_params = m.d_inv.parameters("D_inv");
  const auto all_params = m.parameters();
  nn::Adam<float> opt_g(gen_params, cfg.optimizer);
  nn::Adam<float> opt_d(d_params, cfg.critic_optimizer);
  nn::Adam<float> opt_d_inv(d_inv_params, cfg.critic_optimizer);
  auto good = detail::snapshot(all_params);
  int bad_in_a_row = 0;

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    StepRecord rec;
    rec.step = step;
    for (std::int64_t k = 0; k < cfg.critic_updates; ++k) {
      const auto b = detail::draw_batch(source, target, cfg, rng);
      const auto eps_f = detail::draw_eps(cfg.batch, rng);
      const auto eps_i = detail::draw_eps(cfg.batch, rng);
      Tensor<float> fake, fake_inv;
      {
        NoGradGuard<float> off;
        fake = m.g(b.x_s, b.p);
        fake_inv = m.g_inv(b.x_st, b.p);
      }
      {
        Tape<float> tape;
        nn::zero_grads(d_params);
        const auto t = critic_terms<float>(m.d, b.x_st, fake, eps_f, b.p, cfg.weights.gp_coeff);
        rec.critic_fwd = t.loss.item(), rec.gp_fwd = t.gp.item(), rec.wasserstein_fwd = t.wasserstein.item();
        if (std::isfinite(rec.critic_fwd)) {
          backward(t.loss);
          opt_d.step();
        }
      }
      {
        Tape<float> tape;
        nn::zero_grads(d_inv_params);
        const auto t = critic_terms<float>(m.d_inv, b.x_s, fake_inv, eps_i, b.p, cfg.weights.gp_coeff);
        rec.critic_inv = t.loss.item(), rec.gp_inv = t.gp.item(), rec.wasserstein_inv = t.wasserstein.item();
        if (std::isfinite(rec.critic_inv)) {
          backward(t.loss);
          opt_d_inv.step();
        }
      }
    }
    {
      const auto b = detail::draw_batch(source, target, cfg, rng);
      Tape<float> tape;
      nn::zero_grads(gen_params);
      const auto o = total_loss<float>(m.g, m.g_inv, m.d, m.d_inv, b.x_s, b.x_st, b.p, cfg.weights);
      rec.gen_fwd = o.gen_fwd.item(), rec.gen_inv = o.gen_inv.item(), rec.cyc = o.cyc.item();
      rec.id_fwd = o.id_fwd.item(), rec.id_inv = o.id_inv.item(), rec.total = o.total.item();
      if (rec.finite()) {
        backward(o.total);
        opt_g.step();
      }
      // Critic grads picked up through the generator loss are discarded.
      nn::zero_grads(d_params);
      nn::zero_grads(d_inv_params);
    }

    if (!rec.finite()) {
      ++res.skipped_steps;
      detail::restore(all_params, good);
      if (++bad_in_a_row >= 2) {
        if (!cfg.checkpoint_path.empty()) m.save(cfg.checkpoint_path);
        throw NonFiniteError("train_da: non-finite loss at steps " + std::to_string(step - 1) + " and " +
                             std::to_string(step) + " (" + loss_csv_row(rec) + "); weights restored to step " +
                             std::to_string(step - 2));
      }
    } else {
      bad_in_a_row = 0;
      good = detail::snapshot(all_params);
    }
    res.log.push_back(rec);
    if (on_step) on_step(rec);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() && (step + 1) % cfg.checkpoint_every == 0) {
      m.save(cfg.checkpoint_path);
    }
  }
  if (!cfg.checkpoint_path.empty()) m.save(cfg.checkpoint_path);
  return res;
}

struct TranslateResult {
  Dataset images;
  std::vector<std::string> skipped;  // one line per rejected item
};

/// Maps every image through G at one p. Boxes, paths, domain and index are
/// copied untouched; p is cleared (it must be re-measured from the output).
inline TranslateResult translate_dataset(const Generator<float>& g, const Dataset& ds, double p = 1.0) {
  std::vector<std::optional<ImageSample>> out(ds.size());
  std::vector<std::string> why(ds.size());
  parallel_for(ds.size(), [&](std::size_t i) {
    const auto& s = ds[i];
    if (s.image.height % g.spec().divisor() || s.image.width % g.spec().divisor()) {
      why[i] = "item " + std::to_string(i) + " (" + s.path + "): extent " + std::to_string(s.image.height) + "x" +
               std::to_string(s.image.width) + " not divisible by " + std::to_string(g.spec().divisor());
      return;
    }
    NoGradGuard<float> off;
    ImageSample t = s;
    t.image = to_image(g(to_tensor<float>(s.image), p));
    t.p.reset();
    out[i] = std::move(t);
  });
  TranslateResult r;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (out[i]) {
      r.images.push_back(std::move(*out[i]));
    } else {
      r.skipped.push_back(why[i]);
    }
  }
  return r;
}

}  // namespace pargan
