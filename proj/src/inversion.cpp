#include "tforge/inversion.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace tforge {

SchedulerState scheduler_step(const SchedulerState& sched,
                              const ConstraintResiduals& r,
                              const ConstraintBudget& budget,
                              int64_t input_numel) {
  SchedulerState out = sched;
  out.satisfied[0] = r.reconstruction < budget.alpha;
  out.satisfied[1] = r.mask_size < budget.beta_abs(input_numel);
  out.satisfied[2] = r.ssim > budget.gamma;
  out.satisfied[3] = r.dis_classification < budget.delta;
  for (int i = 0; i < 4; ++i) out.w[i] = out.satisfied[i] ? 0.0 : out.w_large[i];
  return out;
}

std::vector<torch::Tensor> InversionHypothesis::parameters() const {
  std::vector<torch::Tensor> ps = {m_raw, t_raw, mprime_raw};
  if (use_transform) {
    for (auto& t : p->parameters()) ps.push_back(t);
    for (auto& t : q->parameters()) ps.push_back(t);
  }
  return ps;
}

std::vector<torch::Tensor> InversionHypothesis::snapshot() const {
  std::vector<torch::Tensor> snap;
  for (auto& t : parameters()) snap.push_back(t.detach().clone());
  return snap;
}

void InversionHypothesis::restore(const std::vector<torch::Tensor>& snap) {
  torch::NoGradGuard ng;
  auto ps = parameters();
  TORCH_CHECK(ps.size() == snap.size(), "snapshot size mismatch");
  for (size_t i = 0; i < ps.size(); ++i) ps[i].copy_(snap[i]);
}

InversionHypothesis make_hypothesis(SplitModel& model, int64_t y_t,
                                    bool use_transform, int64_t unet_width) {
  InversionHypothesis hyp;
  hyp.target_label = y_t;
  hyp.use_transform = use_transform;
  auto in_shape = model.input_shape();
  hyp.m_raw = torch::full(in_shape, -3.0).set_requires_grad(true);
  hyp.t_raw = torch::zeros(in_shape).set_requires_grad(true);
  hyp.mprime_raw =
      torch::full(model.intermediate_shape(), -2.0).set_requires_grad(true);
  if (use_transform) {
    hyp.p = UNet(in_shape[0], unet_width);
    hyp.q = UNet(in_shape[0], unet_width);
  }
  return hyp;
}

torch::Tensor synthesize(const torch::Tensor& pixels, InversionHypothesis& hyp) {
  if (pixels.dim() != 4 || pixels.sizes().slice(1) != hyp.m_raw.sizes())
    throw UsageError("synthesize: shape mismatch");
  auto m = hyp.mask(), t = hyp.pattern();
  auto px = hyp.use_transform ? hyp.p->forward(pixels) : pixels;
  auto combo = (1 - m) * px + m * t;
  auto out = hyp.use_transform ? hyp.q->forward(combo) : combo;
  return out.clamp(0, 1);
}

ImageBatch synthesize(const ImageBatch& x, InversionHypothesis& hyp) {
  return ImageBatch{synthesize(x.pixels, hyp), x.labels.clone(), {}};
}

torch::Tensor loss_reconstruction(const torch::Tensor& pixels,
                                  InversionHypothesis& hyp) {
  if (!hyp.use_transform) return torch::zeros({});
  return (hyp.q->forward(hyp.p->forward(pixels)) - pixels).abs().mean();
}

torch::Tensor loss_mask(const torch::Tensor& m) { return m.abs().sum(); }
torch::Tensor loss_mask_inter(const torch::Tensor& mprime) { return mprime.abs().sum(); }

DisLoss loss_disentanglement(const torch::Tensor& x, const torch::Tensor& x_prime,
                             InversionHypothesis& hyp, SplitModel& model) {
  if (x.size(0) < 2) throw UsageError("loss_disentanglement: batch must have >= 2 samples");
  auto mprime = hyp.mask_inter();
  auto a_c = mprime * model.h(synthesize(x, hyp));
  auto a_b = (1 - mprime) * model.h(x_prime);
  auto y = torch::full({x.size(0)}, hyp.target_label, torch::kInt64);
  DisLoss out;
  out.classification = torch::nn::functional::cross_entropy(model.g(a_c + a_b), y);
  out.mask_size = loss_mask_inter(mprime);
  return out;
}

LossDiagnostics loss_terms(const torch::Tensor& x, const torch::Tensor& x_prime,
                           InversionHypothesis& hyp, SplitModel& model) {
  auto m = hyp.mask(), t = hyp.pattern(), mprime = hyp.mask_inter();
  auto px = hyp.use_transform ? hyp.p->forward(x) : x;
  auto combo = (1 - m) * px + m * t;
  auto xt = (hyp.use_transform ? hyp.q->forward(combo) : combo).clamp(0, 1);
  auto y = torch::full({x.size(0)}, hyp.target_label, torch::kInt64);

  LossDiagnostics d;
  auto h_xt = model.h(xt);
  d.logits = model.g(h_xt);
  d.classification = torch::nn::functional::cross_entropy(d.logits, y);
  d.reconstruction = hyp.use_transform
                         ? (hyp.q->forward(px) - x).abs().mean()
                         : torch::zeros({});
  d.mask_size = loss_mask(m);
  d.ssim_value = ssim(xt, x);
  auto a_c = mprime * h_xt;
  auto a_b = (1 - mprime) * model.h(x_prime);
  auto dis_cls = torch::nn::functional::cross_entropy(model.g(a_c + a_b), y);
  d.dis_total = dis_cls + loss_mask_inter(mprime);
  d.residuals = ConstraintResiduals{d.reconstruction.item<double>(),
                                    d.mask_size.item<double>(),
                                    d.ssim_value.item<double>(),
                                    dis_cls.item<double>()};
  return d;
}

torch::Tensor combine_loss(const LossDiagnostics& d, const SchedulerState& sched) {
  auto check = [](const torch::Tensor& t, const char* name) {
    if (!t.isfinite().all().item<bool>())
      throw RuntimeFailure(std::string("loss_total: non-finite term '") + name + "'");
  };
  check(d.classification, "classification");
  check(d.reconstruction, "reconstruction");
  check(d.mask_size, "mask");
  check(d.ssim_value, "ssim");
  check(d.dis_total, "disentanglement");
  return d.classification + sched.w[0] * d.reconstruction + sched.w[1] * d.mask_size -
         sched.w[2] * d.ssim_value + sched.w[3] * d.dis_total;
}

LossDiagnostics loss_total(const torch::Tensor& x, const torch::Tensor& x_prime,
                           InversionHypothesis& hyp, SplitModel& model,
                           const SchedulerState& sched) {
  auto d = loss_terms(x, x_prime, hyp, model);
  d.total = combine_loss(d, sched);
  return d;
}

torch::Tensor derangement(int64_t n, torch::Generator& gen) {
  auto perm = torch::randperm(n, gen);
  auto acc = perm.accessor<int64_t, 1>();
  for (int64_t i = 0; i < n; ++i)
    if (acc[i] == i) std::swap(acc[i], acc[(i + 1) % n]);
  return perm;
}

namespace {

double defense_asr(const torch::Tensor& logits, const torch::Tensor& labels,
                   int64_t y_t) {
  auto keep = labels != y_t;
  int64_t total = keep.sum().item<int64_t>();
  if (total == 0) return 0.0;
  auto pred = logits.detach().argmax(1);
  return ((pred == y_t) & keep).sum().item<double>() / total;
}

bool all_satisfied(const SchedulerState& sched, const EngineOptions& eng) {
  if (eng.nc_lambda_schedule || !eng.use_scheduler) return true;
  for (int i = 0; i < 4; ++i) {
    if (i == 3 && !eng.use_disentanglement) continue;
    if (!sched.satisfied[i]) return false;
  }
  return true;
}

void pretrain_identity(InversionHypothesis& hyp, const torch::Tensor& x,
                       int64_t steps, double lr) {
  if (!hyp.use_transform || steps <= 0) return;
  std::vector<torch::Tensor> ps;
  for (auto& t : hyp.p->parameters()) ps.push_back(t);
  for (auto& t : hyp.q->parameters()) ps.push_back(t);
  torch::optim::Adam opt(ps, torch::optim::AdamOptions(lr));
  for (int64_t i = 0; i < steps; ++i) {
    opt.zero_grad();
    auto loss = (hyp.p->forward(x) - x).abs().mean() +
                (hyp.q->forward(x) - x).abs().mean();
    loss.backward();
    opt.step();
  }
}

}  // namespace

std::pair<InversionHypothesis, ReportRow> invert_for_label(
    SplitModel& model, const DefenseSet& defense, const ImageBatch& eval_set,
    int64_t y_t, const ConstraintBudget& budget, const InvertConfig& config) {
  torch::manual_seed(config.seed);
  torch::Generator gen =
      torch::make_generator<torch::CPUGeneratorImpl>(config.seed + 17);
  const auto& eng = config.engine;
  model.eval();
  for (auto& p : model.parameters()) p.set_requires_grad(false);

  auto hyp = make_hypothesis(model, y_t, eng.use_transform, config.unet_width);
  const auto& x = defense.samples.pixels;
  const auto& labels = defense.samples.labels;
  int64_t n = x.size(0);
  int64_t input_numel = hyp.m_raw.numel();
  pretrain_identity(hyp, x, config.pretrain_steps, config.lr_net);

  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(std::vector<torch::Tensor>{hyp.m_raw, hyp.t_raw, hyp.mprime_raw},
                      std::make_unique<torch::optim::AdamOptions>(config.lr_mask));
  if (eng.use_transform) {
    std::vector<torch::Tensor> net_ps;
    for (auto& t : hyp.p->parameters()) net_ps.push_back(t);
    for (auto& t : hyp.q->parameters()) net_ps.push_back(t);
    groups.emplace_back(net_ps,
                        std::make_unique<torch::optim::AdamOptions>(config.lr_net));
  }
  torch::optim::Adam opt(groups, torch::optim::AdamOptions(config.lr_mask));

  std::ofstream log;
  if (!config.log_dir.empty()) {
    fs::create_directories(config.log_dir);
    log.open(fs::path(config.log_dir) / ("label_" + std::to_string(y_t) + "_loss.csv"));
    log << "step,total,classification,reconstruction,mask,ssim,dis,w1,w2,w3,w4\n";
  }

  SchedulerState sched;
  double nc_lambda = eng.nc_lambda_init;
  int nc_up = 0, nc_down = 0;
  const int kNcPatience = 5;

  ReportRow row;
  row.label = y_t;
  std::vector<torch::Tensor> best_sat, best_any;
  double best_sat_asr = -1, best_any_asr = -1;
  double best_sat_mask = 1e30;  // NC mode keeps the smallest successful mask
  ConstraintResiduals best_sat_res;
  int64_t best_step = -1;
  int64_t stale = 0;
  double first_total = 0, last_total = 0;

  for (int64_t step = 0; step < config.steps; ++step) {
    auto xp = x.index_select(0, derangement(n, gen));
    auto d = loss_terms(x, xp, hyp, model);
    sched = scheduler_step(sched, d.residuals, budget, input_numel);
    if (!eng.use_scheduler) sched.w = eng.fixed_w;
    if (!eng.use_disentanglement) sched.w[3] = 0;
    double asr = defense_asr(d.logits, labels, y_t);
    if (eng.nc_lambda_schedule) {
      // this step's loss uses the current lambda; the schedule reacts afterwards
      sched.w[1] = nc_lambda;
      if (asr >= 0.99) { nc_up++; nc_down = 0; } else { nc_down++; nc_up = 0; }
      if (nc_up >= kNcPatience) { nc_lambda *= 1.5; nc_up = 0; }
      if (nc_down >= kNcPatience) { nc_lambda /= 1.5; nc_down = 0; }
    }
    auto total = combine_loss(d, sched);
    double total_v = total.item<double>();
    if (step == 0) first_total = total_v;
    last_total = total_v;

    bool sat = eng.nc_lambda_schedule ? asr >= 0.99 : all_satisfied(sched, eng);
    if (asr > best_any_asr) { best_any_asr = asr; best_any = hyp.snapshot(); }
    if (sat) {
      bool better = eng.nc_lambda_schedule ? d.residuals.mask_size < best_sat_mask
                                           : asr > best_sat_asr;
      if (better) {
        best_sat_mask = d.residuals.mask_size;
        best_sat_asr = asr;
        best_sat = hyp.snapshot();
        best_sat_res = d.residuals;
        best_step = step;
        stale = 0;
      } else {
        ++stale;
      }
    } else {
      stale = 0;
    }
    if (log.is_open())
      log << step << ',' << total_v << ',' << d.classification.item<double>() << ','
          << d.residuals.reconstruction << ',' << d.residuals.mask_size << ','
          << d.residuals.ssim << ',' << d.dis_total.item<double>() << ','
          << sched.w[0] << ',' << sched.w[1] << ',' << sched.w[2] << ','
          << sched.w[3] << '\n';

    opt.zero_grad();
    total.backward();
    opt.step();

    if (config.early_stop_patience > 0 && stale >= config.early_stop_patience) break;
  }

  if (!best_sat.empty()) {
    hyp.restore(best_sat);
    row.constraints_unmet = false;
    row.asr_defense = best_sat_asr;
    row.selected_step = best_step;
  } else if (!best_any.empty()) {
    hyp.restore(best_any);
    row.constraints_unmet = true;
    row.asr_defense = best_any_asr;
  }
  // Recompute residuals from scratch at the selected parameters.
  {
    torch::NoGradGuard ng;
    auto xp = x.index_select(0, derangement(n, gen));
    auto d = loss_terms(x, xp, hyp, model);
    row.residuals = d.residuals;
  }
  row.loss_first = first_total;
  row.loss_last = last_total;
  auto synth = [&](const torch::Tensor& px) {
    torch::NoGradGuard ng;
    return synthesize(px, hyp);
  };
  row.asr_inv = compute_asr(model, synth, eval_set, y_t);

  if (!config.log_dir.empty()) {
    auto dir = fs::path(config.log_dir) / ("label_" + std::to_string(y_t));
    fs::create_directories(dir);
    hyp.save(dir.string());
    torch::NoGradGuard ng;
    write_png(hyp.mask(), (dir / "mask.png").string());
    write_png(hyp.pattern(), (dir / "pattern.png").string());
    int64_t k = std::min<int64_t>(8, n);
    auto sample = ImageBatch{synthesize(x.narrow(0, 0, k), hyp),
                             labels.narrow(0, 0, k), {}};
    render_png(sample, (dir / "inverted_samples.png").string(), true);
    row.artifact_dir = dir.string();
  }
  return {std::move(hyp), std::move(row)};
}

void InversionHypothesis::save(const std::string& dir) const {
  fs::create_directories(dir);
  torch::NoGradGuard ng;
  if (use_transform) {
    torch::save(p.ptr(), (fs::path(dir) / "p.pt").string());
    torch::save(q.ptr(), (fs::path(dir) / "q.pt").string());
  }
  torch::save(std::vector<torch::Tensor>{m_raw.detach(), t_raw.detach(),
                                         mprime_raw.detach()},
              (fs::path(dir) / "masks.pt").string());
}

InversionReport scan_model(SplitModel& model, const DefenseSet& defense,
                           const ImageBatch& eval_set,
                           const ConstraintBudget& budget,
                           const InvertConfig& config) {
  InversionReport report;
  report.engine = config.engine.nc_lambda_schedule ? "nc" : "unicorn";
  for (int64_t y = 0; y < model.num_classes(); ++y) {
    try {
      auto cfg = config;
      cfg.seed = config.seed + static_cast<uint64_t>(y) * 1000;
      report.rows.push_back(
          invert_for_label(model, defense, eval_set, y, budget, cfg).second);
    } catch (const std::exception& e) {
      ReportRow row;
      row.label = y;
      row.error = e.what();
      report.rows.push_back(row);
    }
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const ReportRow& a, const ReportRow& b) {
                     return a.asr_inv > b.asr_inv;
                   });
  return report;
}

Verdict decide_backdoor(const InversionReport& report, double threshold) {
  if (report.rows.empty()) throw UsageError("decide_backdoor: empty report");
  Verdict v;
  for (const auto& row : report.rows) {
    if (!row.error.empty() || row.constraints_unmet) continue;
    if (row.asr_inv > v.max_asr_inv) {
      v.max_asr_inv = row.asr_inv;
      v.target_label = row.label;
    }
  }
  v.backdoored = v.max_asr_inv > threshold;
  if (!v.backdoored) v.target_label = -1;
  return v;
}

std::string InversionReport::to_json() const {
  json j;
  j["engine"] = engine;
  j["rows"] = json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"label", r.label},
                         {"asr_inv", r.asr_inv},
                         {"asr_defense", r.asr_defense},
                         {"constraints_unmet", r.constraints_unmet},
                         {"selected_step", r.selected_step},
                         {"loss_first", r.loss_first},
                         {"loss_last", r.loss_last},
                         {"residuals",
                          {{"reconstruction", r.residuals.reconstruction},
                           {"mask", r.residuals.mask_size},
                           {"ssim", r.residuals.ssim},
                           {"dis", r.residuals.dis_classification}}},
                         {"artifact_dir", r.artifact_dir},
                         {"error", r.error}});
  }
  return j.dump(2);
}

InversionReport InversionReport::from_json(const std::string& text) {
  json j = json::parse(text);
  InversionReport rep;
  rep.engine = j.at("engine").get<std::string>();
  for (const auto& jr : j.at("rows")) {
    ReportRow r;
    r.label = jr.at("label").get<int64_t>();
    r.asr_inv = jr.at("asr_inv").get<double>();
    r.asr_defense = jr.at("asr_defense").get<double>();
    r.constraints_unmet = jr.at("constraints_unmet").get<bool>();
    r.selected_step = jr.at("selected_step").get<int64_t>();
    r.loss_first = jr.at("loss_first").get<double>();
    r.loss_last = jr.at("loss_last").get<double>();
    r.residuals.reconstruction = jr["residuals"]["reconstruction"].get<double>();
    r.residuals.mask_size = jr["residuals"]["mask"].get<double>();
    r.residuals.ssim = jr["residuals"]["ssim"].get<double>();
    r.residuals.dis_classification = jr["residuals"]["dis"].get<double>();
    r.artifact_dir = jr.at("artifact_dir").get<std::string>();
    r.error = jr.at("error").get<std::string>();
    rep.rows.push_back(r);
  }
  return rep;
}

void InversionReport::save(const std::string& path) const {
  auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << to_json();
}

InversionReport InversionReport::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  return from_json(std::string((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>()));
}

}  // namespace tforge
