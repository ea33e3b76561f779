// Copyright 2026 The bpfsim Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "bpf/protocol.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "bpf/error.hpp"
#include "bpf/parallel.hpp"

namespace bpf {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kStageTag = 0x7374616765ULL;
constexpr std::uint64_t kExpertTag = 0x6578706572ULL;
constexpr std::uint64_t kIncrementalTag = 0x696e6372ULL;

struct MethodName {
  Method method;
  const char* name;
};

constexpr MethodName kMethods[] = {
    {Method::kFinetune, "finetune"}, {Method::kJoint, "joint"},
    {Method::kUkd, "ukd"},           {Method::kBpf, "bpf"},
    {Method::kBpfNoBp, "bpf_no_bp"}, {Method::kBpfNoBf, "bpf_no_bf"},
    {Method::kBpfNoDwf, "bpf_no_dwf"}, {Method::kBpUkd, "bp_ukd"},
    {Method::kBfUkd, "bf_ukd"},
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed: " + path);
}

nlohmann::json box_json(const BBox& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

nlohmann::json recall_json(const RecallStat& r) {
  const auto v = r.value();
  return {{"covered", r.covered}, {"total", r.total},
          {"recall", v ? nlohmann::json(*v) : nlohmann::json()}};
}

std::vector<BBox> boxes_of(const std::vector<Object>& objs, const std::vector<int>& classes) {
  std::vector<BBox> out;
  for (const auto& o : objs) {
    if (std::find(classes.begin(), classes.end(), o.class_id) != classes.end()) {
      out.push_back(o.box);
    }
  }
  return out;
}

void add_recall(RecallStat& stat, std::span<const BBox> boxes, std::span<const BBox> gts) {
  const RecallCounts rc = recall_counts(boxes, gts, 0.5);
  stat.covered += rc.covered;
  stat.total += rc.total;
}

}  // namespace

Method parse_method(const std::string& s) {
  for (const auto& m : kMethods) {
    if (s == m.name) return m.method;
  }
  throw ConfigError("unknown method '" + s + "'");
}

std::string to_string(Method method) {
  for (const auto& m : kMethods) {
    if (m.method == method) return m.name;
  }
  return "unknown";
}

MethodSpec method_spec(Method m) {
  switch (m) {
    case Method::kFinetune:
    case Method::kJoint: return {false, false, DistillKind::kNone};
    case Method::kUkd: return {false, false, DistillKind::kUkd};
    case Method::kBpUkd: return {true, false, DistillKind::kUkd};
    case Method::kBfUkd: return {false, true, DistillKind::kUkd};
    case Method::kBpfNoDwf: return {true, true, DistillKind::kUkd};
    case Method::kBpfNoBp: return {false, true, DistillKind::kDwf};
    case Method::kBpfNoBf: return {true, false, DistillKind::kDwf};
    case Method::kBpf: return {true, true, DistillKind::kDwf};
  }
  throw Error("unhandled method");
}

SynthConfig benchmark_synth() {
  SynthConfig c;
  c.noise = 0.7;
  c.cooccurrence_rate = 0.8;
  c.test_scenes = 300;
  return c;
}

TrainConfig benchmark_train() {
  TrainConfig c;
  c.epochs = 60;
  c.schedule = LrSchedule::kCosine;
  return c;
}

void ExperimentConfig::validate() const {
  synth.validate();
  train.validate();
  bp.validate();
  bf.validate();
  distill.validate();
  eval.validate();
  if (alpha < 0.0) throw ConfigError("alpha must be non-negative");
  const ClassRegistry reg = registry();
  if (reg.num_stages() < 2 && method != Method::kJoint) {
    throw ConfigError("incremental methods need at least two stages");
  }
  for (int w : train.proposals.window_sizes) {
    if (w > synth.grid_width || w > synth.grid_height) {
      throw ConfigError("train.window_sizes exceed the grid");
    }
  }
}

std::string hash_of(const ExperimentConfig& c) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(to_json(c).dump());
  return os.str();
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

nlohmann::json to_json(const StageResult& r) {
  const StageStats& s = r.stats;
  return {{"stage", r.stage + 1},
          {"checkpoint", r.checkpoint},
          {"map", r.map},
          {"stats",
           {{"pseudo_labels", s.pseudo_labels},
            {"pseudo_high_weight", s.pseudo_high_weight},
            {"pseudo_low_weight", s.pseudo_low_weight},
            {"pseudo_old", recall_json(s.pseudo_old)},
            {"discarded", s.discarded},
            {"discard_future", recall_json(s.discard_future)},
            {"discard_unlabeled", recall_json(s.discard_unlabeled)},
            {"distillprop_old", recall_json(s.distillprop_old)},
            {"distillprop_new", recall_json(s.distillprop_new)},
            {"negatives_sampled", s.negatives_sampled},
            {"negatives_in_discard", s.negatives_in_discard},
            {"exhausted_batches", s.exhausted_batches},
            {"cooccurrence",
             {{"past", s.cooccurrence.past},
              {"current", s.cooccurrence.current},
              {"future", s.cooccurrence.future}}},
            {"final_loss", s.final_loss}}}};
}

nlohmann::json to_json(const ExperimentReport& r) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : r.stages) stages.push_back(to_json(s));
  return {{"method", r.method},
          {"seed", r.seed},
          {"config_hash", r.config_hash},
          {"stages", std::move(stages)}};
}

DetectorModel expand_model(const DetectorModel& m_prev, const std::vector<int>& new_classes) {
  for (int c : new_classes) {
    if (m_prev.index_of(c) >= 0) {
      throw Error("expand_model: class " + std::to_string(c) + " already known");
    }
  }
  std::vector<int> classes = m_prev.classes;
  classes.insert(classes.end(), new_classes.begin(), new_classes.end());
  DetectorModel m = DetectorModel::zeros(m_prev.registry, classes, m_prev.feature_dim,
                                         m_prev.proposals);
  m.proposal_threshold = m_prev.proposal_threshold;
  m.trained_through_stage = m_prev.trained_through_stage;
  const int k_old = m_prev.num_classes();
  for (int k = 0; k < k_old; ++k) {
    std::copy(m_prev.cls.row(k).begin(), m_prev.cls.row(k).end(), m.cls.row(k).begin());
  }
  std::copy(m_prev.cls.row(k_old).begin(), m_prev.cls.row(k_old).end(),
            m.cls.row(m.background_index()).begin());
  std::copy(m_prev.reg.data.begin(), m_prev.reg.data.end(), m.reg.data.begin());
  m.obj = m_prev.obj;
  return m;
}

namespace {

/// Per-scene state that stays fixed for the whole stage.
struct ScenePrep {
  std::vector<WeightedAnnotation> gt;
  std::vector<WeightedAnnotation> targets;
  std::vector<BBox> gt_boxes;
  ScenePlan plan;
  std::vector<double> attention;
  std::vector<Proposal> ranked_old;
  std::vector<WeightedAnnotation> pseudo;
  nlohmann::json bp_trace;
};

StageResult evaluate_stage(const DetectorModel& model, const StageDataset& test,
                           const ClassRegistry& registry, int t, const ExperimentConfig& cfg) {
  StageResult r;
  r.stage = t;
  r.map = evaluate(model, test, registry, t, cfg.eval);
  return r;
}

}  // namespace

StageOutcome run_stage(int t, const DetectorModel* m_prev, const StageDataset& ds,
                       const StageDataset& test, const ClassRegistry& registry,
                       const ExperimentConfig& cfg, const DumpOptions& dump) {
  cfg.validate();
  if (t < 0 || t >= registry.num_stages()) throw Error("run_stage: stage out of range");
  if ((t == 0) != (m_prev == nullptr)) {
    throw Error("run_stage: a previous model is required exactly for stages after the first");
  }
  if (ds.stage != t) throw Error("run_stage: dataset belongs to another stage");
  const std::uint64_t stage_seed = derive_seed(cfg.seed, {kStageTag, static_cast<std::uint64_t>(t)});
  const TrainingSet base_set = training_set(ds);

  if (t == 0) {
    double loss = 0.0;
    DetectorModel model =
        train_supervised(base_set, registry, registry.stage(0), cfg.train, stage_seed, &loss);
    model.trained_through_stage = 0;
    StageOutcome out{std::move(model), {}};
    out.result = evaluate_stage(out.model, test, registry, 0, cfg);
    out.result.stats.final_loss = loss;
    out.result.stats.cooccurrence = cooccurrence_stats(ds, registry);
    return out;
  }

  if (m_prev->classes != registry.classes_through(t - 1)) {
    throw Error("run_stage: previous model's classes do not match the split registry");
  }
  const MethodSpec spec = method_spec(cfg.method);
  const std::vector<int>& current = registry.stage(t);
  const std::vector<int> past = registry.past(t);
  const std::vector<int> future = registry.future(t);
  std::vector<int> unlabeled = past;
  unlabeled.insert(unlabeled.end(), future.begin(), future.end());

  DetectorModel m_cur = expand_model(*m_prev, current);
  std::optional<DetectorModel> m_im;
  if (spec.distill == DistillKind::kDwf) {
    m_im = train_supervised(base_set, registry, current, cfg.train,
                            derive_seed(stage_seed, {kExpertTag}));
    m_im->trained_through_stage = t;
  }

  const FeatureGrid& g0 = ds.scenes.front().features;
  const auto candidates = candidate_boxes(cfg.train.proposals, g0.height, g0.width);
  const std::size_t n_scenes = ds.scenes.size();
  std::vector<ScenePrep> prep(n_scenes);
  std::vector<std::optional<RoiPooler>> poolers(n_scenes);
  std::vector<std::optional<CandidateFeatures>> cache(n_scenes);
  parallel_for(n_scenes, [&](std::size_t i) {
    const Scene& scene = ds.scenes[i];
    ScenePrep& p = prep[i];
    p.gt = base_set.targets[i];
    for (const auto& g : p.gt) p.gt_boxes.push_back(g.box);
    const RoiPooler& pooler = poolers[i].emplace(scene.features, cfg.train.proposals.ring_width);
    cache[i].emplace(pooler, candidates);
    if (spec.bridge_past) {
      const auto dets = predict_old(*m_prev, pooler, candidates, scene.extent());
      PseudoLabelTrace trace;
      p.pseudo = select_pseudo_labels(dets, m_prev->classes, p.gt, cfg.bp,
                                      dump.bridge_past ? &trace : nullptr);
      if (dump.bridge_past) p.bp_trace = trace_to_json(trace, dets);
    }
    p.targets = merge_targets(p.gt, p.pseudo, current);
    p.plan = plan_scene(candidates, p.targets);
    if (spec.bridge_future) {
      p.attention = attention_scores(attention_map(scene.features, cfg.bf.p), candidates);
    }
    if (spec.distill != DistillKind::kNone) {
      p.ranked_old = propose(*m_prev, *cache[i], static_cast<std::size_t>(cfg.distill.n_top));
    }
  });

  StageStats stats;
  stats.cooccurrence = cooccurrence_stats(ds, registry);
  for (std::size_t i = 0; i < n_scenes; ++i) {
    const auto& p = prep[i];
    stats.pseudo_labels += p.pseudo.size();
    std::vector<BBox> pseudo_boxes;
    for (const auto& a : p.pseudo) {
      pseudo_boxes.push_back(a.box);
      (a.loss_weight == cfg.bp.high_weight ? stats.pseudo_high_weight : stats.pseudo_low_weight)++;
    }
    if (spec.bridge_past) add_recall(stats.pseudo_old, pseudo_boxes, boxes_of(ds.scenes[i].objects, past));
  }

  if (!dump.dir.empty() && dump.bridge_past && spec.bridge_past) {
    fs::create_directories(dump.dir);
    for (std::size_t i = 0; i < n_scenes; ++i) {
      write_text((fs::path(dump.dir) / ("bp_stage" + std::to_string(t + 1) + "_scene" +
                                        std::to_string(i) + ".json"))
                     .string(),
                 prep[i].bp_trace.dump(1) + "\n");
    }
  }

  const TrainConfig& tc = cfg.train;
  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    epoch_loss = 0.0;
    for (std::size_t i : epoch_order(base_set, stage_seed, epoch)) {
      const Scene& scene = ds.scenes[i];
      const ScenePrep& p = prep[i];
      Rng rng(scene_stream(stage_seed, scene.scene_id, epoch, kIncrementalTag));
      const RoiPooler& pooler = *poolers[i];

      std::vector<bool> excluded;
      const auto proposals = propose(m_cur, *cache[i], static_cast<std::size_t>(tc.proposals.top_n));
      if (spec.bridge_future) {
        std::vector<double> scores(proposals.size());
        for (std::size_t k = 0; k < proposals.size(); ++k) {
          scores[k] = p.attention[proposals[k].index];
        }
        const auto discard = select_discard_set(proposals, scores, p.targets, cfg.bf);
        excluded = discard_mask(discard, candidates.size());
        if (epoch == 0) {
          std::vector<BBox> discarded;
          for (const auto& d : discard) {
            if (d.discarded) discarded.push_back(d.proposal.box);
          }
          stats.discarded += discarded.size();
          add_recall(stats.discard_future, discarded, boxes_of(scene.objects, future));
          add_recall(stats.discard_unlabeled, discarded, boxes_of(scene.objects, unlabeled));
          if (!dump.dir.empty() && dump.bridge_future) {
            fs::create_directories(dump.dir);
            const std::string stem = (fs::path(dump.dir) / ("bf_stage" + std::to_string(t + 1) +
                                                            "_scene" + std::to_string(i)))
                                         .string();
            write_text(stem + ".pgm", attention_pgm(attention_map(scene.features, cfg.bf.p)));
            nlohmann::json boxes = nlohmann::json::array();
            for (const auto& d : discard) {
              if (d.discarded) {
                boxes.push_back({{"box", box_json(d.proposal.box)},
                                 {"objectness", d.proposal.objectness},
                                 {"attention", d.attention_score}});
              }
            }
            write_text(stem + ".json", nlohmann::json{{"discarded", boxes}}.dump(1) + "\n");
          }
        }
      }

      const auto batch = build_supervised_batch(m_cur, pooler, p.plan, p.targets, excluded, tc, rng, proposals);
      stats.negatives_sampled += batch.negative_indices.size();
      if (batch.negative_indices.empty()) ++stats.exhausted_batches;
      if (!excluded.empty()) {
        for (std::size_t k : batch.negative_indices) {
          if (excluded[k]) ++stats.negatives_in_discard;
        }
      }

      Gradients grads = Gradients::like(m_cur);
      const auto sup = loss_and_grads(m_cur, batch.rois, batch.objectness, tc.box_weight, &grads);
      double loss = sup.total();

      if (spec.distill != DistillKind::kNone) {
        const auto regions =
            sample_distill_regions(p.ranked_old, cfg.distill.n_top, cfg.distill.n_sample, rng);
        if (epoch == 0) {
          std::vector<BBox> rb;
          for (const auto& r : regions) rb.push_back(r.box);
          add_recall(stats.distillprop_old, rb, boxes_of(scene.objects, past));
          add_recall(stats.distillprop_new, rb, boxes_of(scene.objects, current));
        }
        Gradients dgrads = Gradients::like(m_cur);
        const DistillResult d =
            spec.distill == DistillKind::kDwf
                ? dwf_loss_regions(pooler, regions, p.gt_boxes, *m_prev, *m_im, m_cur,
                                   cfg.distill, &dgrads)
                : ukd_loss_regions(pooler, regions, *m_prev, m_cur, &dgrads);
        grads.add(dgrads, cfg.alpha);
        loss += cfg.alpha * d.loss;
      }
      epoch_loss += loss;
      sgd_step(m_cur, grads, tc.lr_at(epoch));
    }
    epoch_loss /= static_cast<double>(n_scenes);
  }
  m_cur.trained_through_stage = t;

  StageOutcome out{std::move(m_cur), {}};
  out.result = evaluate_stage(out.model, test, registry, t, cfg);
  stats.final_loss = epoch_loss;
  out.result.stats = stats;
  return out;
}

StageOutcome run_joint(const Benchmark& bench, const ExperimentConfig& cfg) {
  TrainingSet set;
  for (const auto& ds : bench.train) {
    for (const auto& scene : ds.scenes) {
      set.scenes.push_back(&scene);
      std::vector<WeightedAnnotation> t;
      for (const auto& o : scene.objects) t.push_back({o.box, o.class_id, 1.0, Origin::kGroundTruth});
      set.targets.push_back(std::move(t));
    }
  }
  const int last = bench.registry.num_stages() - 1;
  double loss = 0.0;
  DetectorModel model =
      train_supervised(set, bench.registry, bench.registry.classes_through(last), cfg.train,
                       derive_seed(cfg.seed, {kStageTag, 0x6a6f696e74ULL}), &loss);
  model.trained_through_stage = last;
  StageOutcome out{std::move(model), {}};
  out.result = evaluate_stage(out.model, bench.test, bench.registry, last, cfg);
  out.result.stats.final_loss = loss;
  return out;
}

void save_checkpoint(const DetectorModel& model, const std::string& path,
                     const std::string& train_cfg_hash) {
  nlohmann::json j = model;
  j["schema_version"] = kCheckpointSchema;
  j["train_cfg_hash"] = train_cfg_hash;
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_text(path, j.dump() + "\n");
}

DetectorModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint not found: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(path + ": parse error at byte " + std::to_string(e.byte));
  }
  try {
    const int schema = j.at("schema_version").get<int>();
    if (schema != kCheckpointSchema) {
      throw Error(path + ": unsupported checkpoint schema_version " + std::to_string(schema));
    }
    return j.get<DetectorModel>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": malformed checkpoint: " + e.what());
  }
}

namespace {

std::string train_hash(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << std::hex << fnv1a64(nlohmann::json(cfg.train).dump());
  return os.str();
}

std::string checkpoint_name(int t) { return "checkpoints/stage_" + std::to_string(t + 1) + ".json"; }

void persist(const std::string& dir, const StageOutcome& o, const ExperimentConfig& cfg,
             StageResult& result) {
  result.checkpoint = checkpoint_name(result.stage);
  if (!dir.empty()) save_checkpoint(o.model, (fs::path(dir) / result.checkpoint).string(), train_hash(cfg));
}

}  // namespace

std::vector<ExperimentReport> run_methods(const ExperimentConfig& base,
                                          const std::vector<Method>& methods,
                                          const std::string& out_dir, const DumpOptions& dump) {
  base.validate();
  const ClassRegistry registry = base.registry();
  const Benchmark bench = build_stage_datasets(base.synth, registry, base.seed);

  std::optional<StageOutcome> first;
  std::vector<ExperimentReport> reports;
  for (Method method : methods) {
    ExperimentConfig cfg = base;
    cfg.method = method;
    ExperimentReport report;
    report.method = to_string(method);
    report.seed = cfg.seed;
    report.config_hash = hash_of(cfg);
    const std::string dir =
        out_dir.empty() ? "" : (methods.size() == 1 ? out_dir : (fs::path(out_dir) / report.method).string());

    if (method == Method::kJoint) {
      StageOutcome o = run_joint(bench, cfg);
      persist(dir, o, cfg, o.result);
      report.stages.push_back(o.result);
    } else {
      if (!first) first = run_stage(0, nullptr, bench.train[0], bench.test, registry, cfg);
      StageResult r0 = first->result;
      persist(dir, *first, cfg, r0);
      report.stages.push_back(r0);
      DetectorModel prev = first->model;
      for (int t = 1; t < registry.num_stages(); ++t) {
        DumpOptions d = dump;
        if (!d.dir.empty() && methods.size() > 1) d.dir = (fs::path(d.dir) / report.method).string();
        StageOutcome o = run_stage(t, &prev, bench.train[t], bench.test, registry, cfg, d);
        persist(dir, o, cfg, o.result);
        report.stages.push_back(o.result);
        prev = std::move(o.model);
      }
    }
    if (!dir.empty()) write_run_dir(report, cfg, dir);
    reports.push_back(std::move(report));
  }
  return reports;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                const DumpOptions& dump) {
  return run_methods(cfg, {cfg.method}, out_dir, dump).front();
}

std::string ap_csv(const std::vector<ExperimentReport>& reports) {
  std::ostringstream os;
  os << "stage,method,class,ap\n";
  for (const auto& r : reports) {
    for (const auto& s : r.stages) {
      for (const auto& [c, ap] : s.map.per_class) {
        os << s.stage + 1 << ',' << r.method << ',' << c << ',' << format_double(ap) << '\n';
      }
    }
  }
  return os.str();
}

std::string summary_csv(const std::vector<ExperimentReport>& reports) {
  std::ostringstream os;
  os << "method,seed,stage,old_map,new_map,all_map,avg\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& r : reports) {
    for (const auto& s : r.stages) {
      os << r.method << ',' << r.seed << ',' << s.stage + 1 << ',' << opt(s.map.old_map) << ','
         << opt(s.map.new_map) << ',' << format_double(s.map.all_map) << ','
         << format_double(s.map.avg) << '\n';
    }
  }
  return os.str();
}

void write_run_dir(const ExperimentReport& report, const ExperimentConfig& cfg,
                   const std::string& dir) {
  fs::create_directories(dir);
  write_text((fs::path(dir) / "report.json").string(), to_json(report).dump(2) + "\n");
  write_text((fs::path(dir) / "ap.csv").string(), ap_csv({report}));
  write_text((fs::path(dir) / "summary.csv").string(), summary_csv({report}));
  const nlohmann::json manifest{{"tool", "bpfsim"},
                                {"version", kVersion},
                                {"compiler", __VERSION__},
                                {"config_hash", hash_of(cfg)},
                                {"seed", cfg.seed},
                                {"method", to_string(cfg.method)},
                                {"config", to_json(cfg)}};
  write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

std::vector<AblationRow> ablation_grid(const std::string& name, const ExperimentConfig& base) {
  std::vector<AblationRow> rows;
  auto with = [&](const std::string& label, auto&& edit) {
    ExperimentConfig c = base;
    edit(c);
    rows.push_back({label, c});
  };
  if (name == "table5") {
    with("a", [](ExperimentConfig& c) { c.method = Method::kUkd; });
    with("b", [](ExperimentConfig& c) { c.method = Method::kBpUkd; });
    with("c", [](ExperimentConfig& c) { c.method = Method::kBfUkd; });
    with("d", [](ExperimentConfig& c) { c.method = Method::kBpfNoDwf; });
    with("e", [](ExperimentConfig& c) { c.method = Method::kBpf; });
  } else if (name == "table4") {
    with("lambda2=1.0/part", [](ExperimentConfig& c) {
      c.method = Method::kBpf;
      c.distill.lambda2 = 1.0;
      c.distill.box_mode = BoxMode::kPart;
    });
    with("lambda2=0.5/part", [](ExperimentConfig& c) {
      c.method = Method::kBpf;
      c.distill.lambda2 = 0.5;
      c.distill.box_mode = BoxMode::kPart;
    });
    with("lambda2=0.5/all", [](ExperimentConfig& c) {
      c.method = Method::kBpf;
      c.distill.lambda2 = 0.5;
      c.distill.box_mode = BoxMode::kAll;
    });
  } else if (name == "bf-clauses") {
    for (int mask = 0; mask < 4; ++mask) {
      const bool attn = mask & 1, obj = mask & 2;
      with(std::string("attention=") + (attn ? "on" : "off") + "/objectness=" + (obj ? "on" : "off"),
           [&](ExperimentConfig& c) {
             c.method = Method::kBpf;
             c.bf.use_attention = attn;
             c.bf.use_objectness = obj;
           });
    }
  } else {
    throw ConfigError("unknown ablation grid '" + name + "' (table5, table4, bf-clauses)");
  }
  return rows;
}

}  // namespace bpf
