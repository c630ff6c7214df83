#include "ralign/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include "ralign/checkpoint.hpp"
#include "ralign/dataset.hpp"
#include "ralign/eval.hpp"
#include "ralign/mining.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ralign {

namespace {

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

void require_flag(const std::string& value, const std::string& flag,
                  const std::string& command) {
  if (value.empty())
    throw ConfigError(command + " requires " + flag);
}

Modality single_modality(const CliArgs& args) {
  if (args.modality.size() != 1)
    throw ConfigError(args.command + " requires exactly one --modality");
  return modality_from_name(args.modality[0]);
}

void ensure_parent_dir(const std::string& path) {
  fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

// Groups a split by modality so schedules can index per-modality pools.
std::map<Modality, std::vector<Sample>> load_split(const std::string& root,
                                                   const std::string& split) {
  std::map<Modality, std::vector<Sample>> by_mod;
  for (Sample& s : read_dataset(root, split)) by_mod[s.modality].push_back(std::move(s));
  return by_mod;
}

const std::vector<Sample>& pool_for(
    const std::map<Modality, std::vector<Sample>>& data, Modality m,
    const std::string& split) {
  auto it = data.find(m);
  if (it == data.end() || it->second.empty())
    throw std::runtime_error("split '" + split + "' has no samples of modality '" +
                             modality_name(m) + "'");
  return it->second;
}

// Stage outputs carry a canonical frozen set so identical pipelines produce
// byte-identical checkpoints: fully frozen after the base stages, adapter
// parameters live after extension.
void freeze_all(Model& model) {
  model.params().set_trainable([](const std::string&) { return false; });
}

void mark_adapters_live(Model& model) {
  model.params().set_trainable(
      [](const std::string& n) { return starts_with(n, "adapters."); });
}

struct StageResult {
  int steps = 0;
  double final_total = 0.0;
};

// Shared optimization loop: schedules epochs over `order`, logs one JSONL
// line per step to <out>.log.jsonl, and reports progress every tenth of the
// run. Point clouds of plain point-text batches are re-augmented per step
// from seeds derived of (config seed, step, position in batch).
StageResult run_stage(Model& model, const TrainConfig& tc,
                      const std::vector<Modality>& order,
                      const std::map<Modality, std::vector<Sample>>& data,
                      const std::function<bool(const std::string&)>& trainable,
                      bool lm_stage, bool augment, const std::string& out,
                      std::ostream& log) {
  Trainer trainer(model, tc, trainable);
  log << "training " << trainer.trainable_params().size() << " tensors for "
      << tc.total_steps << " steps (batch " << tc.batch_size << ")\n";
  std::map<Modality, size_t> sizes;
  for (Modality m : order) sizes[m] = pool_for(data, m, "train").size();

  const std::string log_path = out + ".log.jsonl";
  ensure_parent_dir(out);
  std::ofstream steps_out(log_path, std::ios::binary | std::ios::trunc);
  if (!steps_out)
    throw std::runtime_error("cannot write training log '" + log_path + "'");

  StageResult res;
  const int report_every = std::max(1, tc.total_steps / 10);
  int epoch = 0;
  while (res.steps < tc.total_steps) {
    for (BatchPlanEntry& e : semi_hybrid_epoch(sizes, order, tc.batch_size,
                                               tc.seed, epoch)) {
      if (res.steps >= tc.total_steps) break;
      const std::vector<Sample>& pool = data.at(e.modality);
      std::vector<Sample> batch;
      batch.reserve(e.indices.size());
      for (size_t idx : e.indices) batch.push_back(pool[idx]);
      if (augment && e.modality == Modality::pc_text) {
        for (size_t i = 0; i < batch.size(); ++i) {
          Rng rng(derive_seed(tc.seed, "augment/" + std::to_string(res.steps + 1) +
                                           "/" + std::to_string(i)));
          batch[i].points = augment_points(batch[i].points, rng, AugmentConfig{});
        }
      }
      StepReport r = lm_stage ? trainer.train_step_lm(batch) : trainer.train_step(batch);
      steps_out << step_report_json(r) << "\n";
      res.steps = r.step;
      res.final_total = r.total;
      if (r.step % report_every == 0 || r.step == tc.total_steps)
        log << "  step " << r.step << "/" << tc.total_steps << " ["
            << modality_name(r.modality) << "] total=" << r.total << " lr=" << r.lr
            << "\n";
    }
    ++epoch;
  }
  return res;
}

json base_summary(const CliArgs& args, const RunConfig& cfg) {
  json j;
  j["command"] = args.command;
  j["seed"] = cfg.seed;
  if (!args.out.empty()) j["out"] = args.out;
  return j;
}

json cmd_gen_data(const CliArgs& args, const RunConfig& cfg, std::ostream& log) {
  require_flag(args.out, "--out", "gen-data");
  if (cfg.train_per_modality < 1 || cfg.test_per_modality < 1)
    throw ConfigError("gen-data requires positive per-modality sample counts");
  GenConfig g;
  g.seed = cfg.seed;
  g.train_per_modality = cfg.train_per_modality;
  g.test_per_modality = cfg.test_per_modality;
  log << "generating dataset at " << args.out << " (seed " << g.seed << ")\n";
  GenStats stats = generate_dataset(args.out, g);
  json j = base_summary(args, cfg);
  j["train_counts"] = stats.train_counts;
  j["test_counts"] = stats.test_counts;
  return j;
}

json cmd_pretrain_lm(const CliArgs& args, const RunConfig& cfg, std::ostream& log) {
  require_flag(args.out, "--out", "pretrain-lm");
  require_flag(args.dataset_root, "--dataset-root", "pretrain-lm");
  Model model = Model::create(cfg.model, cfg.seed);
  auto data = load_split(args.dataset_root, "train");
  StageResult res;
  if (cfg.train.total_steps > 0) {
    // Caption modeling sees both prompt styles: whole-image and whole-cloud
    // captions cover the full template grammar.
    const std::vector<Modality> order = {Modality::img_text, Modality::pc_text};
    res = run_stage(model, cfg.train, order, data,
                    [](const std::string& n) { return starts_with(n, "lm."); },
                    /*lm_stage=*/true, /*augment=*/false, args.out, log);
  }
  freeze_all(model);
  model.lm_pretrained = true;
  ensure_parent_dir(args.out);
  save_checkpoint(model, args.out);
  json j = base_summary(args, cfg);
  j["steps"] = res.steps;
  j["final_loss"] = res.final_total;
  return j;
}

json cmd_pretrain_base(const CliArgs& args, const RunConfig& cfg, std::ostream& log) {
  require_flag(args.out, "--out", "pretrain-base");
  require_flag(args.dataset_root, "--dataset-root", "pretrain-base");
  require_flag(args.checkpoint, "--checkpoint", "pretrain-base");
  Model model = Model::create(cfg.model, cfg.seed);
  load_checkpoint(model, args.checkpoint);
  if (!model.lm_pretrained)
    throw std::runtime_error(
        "pretrain-base expects a checkpoint produced by pretrain-lm");
  auto data = load_split(args.dataset_root, "train");
  StageResult res;
  if (cfg.train.total_steps > 0) {
    // The alignment stack trains against frozen encoders and the frozen
    // caption generator; image-text pairs only.
    const std::vector<Modality> order = {Modality::img_text};
    res = run_stage(model, cfg.train, order, data,
                    [](const std::string& n) {
                      return starts_with(n, "qformer.") || starts_with(n, "heads.");
                    },
                    /*lm_stage=*/false, /*augment=*/false, args.out, log);
  }
  freeze_all(model);
  model.base_pretrained = true;
  ensure_parent_dir(args.out);
  save_checkpoint(model, args.out);
  json j = base_summary(args, cfg);
  j["steps"] = res.steps;
  j["final_loss"] = res.final_total;
  return j;
}

json cmd_extend(const CliArgs& args, const RunConfig& cfg, std::ostream& log) {
  require_flag(args.out, "--out", "extend");
  require_flag(args.checkpoint, "--checkpoint", "extend");
  Modality m = single_modality(args);
  Model model = Model::create(cfg.model, cfg.seed);
  load_checkpoint(model, args.checkpoint);
  if (!model.base_pretrained)
    throw std::runtime_error("extend expects a base-pretrained checkpoint");
  model.register_modality(m);
  mark_adapters_live(model);
  ensure_parent_dir(args.out);
  save_checkpoint(model, args.out);

  const std::string prefix = std::string("adapters.") + modality_name(m) + ".";
  int added = 0;
  for (const std::string& name : model.params().names())
    if (starts_with(name, prefix)) ++added;
  log << "registered modality " << modality_name(m) << " (" << added
      << " new tensors)\n";
  json j = base_summary(args, cfg);
  j["modality"] = modality_name(m);
  j["new_tensors"] = added;
  return j;
}

json cmd_pretrain(const CliArgs& args, const RunConfig& cfg, std::ostream& log) {
  require_flag(args.out, "--out", "pretrain");
  require_flag(args.checkpoint, "--checkpoint", "pretrain");
  require_flag(args.dataset_root, "--dataset-root", "pretrain");
  Model model = Model::create(cfg.model, cfg.seed);
  load_checkpoint(model, args.checkpoint);
  if (!model.base_pretrained)
    throw std::runtime_error("pretrain expects a base-pretrained checkpoint");

  // Schedule order: --modality flags, else the config's modality_order, else
  // every registered extension in name order.
  std::vector<Modality> order;
  if (!args.modality.empty())
    for (const std::string& name : args.modality)
      order.push_back(modality_from_name(name));
  else if (!cfg.train.modality_order.empty())
    order = cfg.train.modality_order;
  else
    order = model.extended_modalities();
  if (order.empty())
    throw ConfigError("pretrain: checkpoint has no extension modalities; run extend first");
  std::set<std::string> keys;
  for (Modality m : order) {
    if (m == Modality::img_text)
      throw ConfigError("pretrain trains extension adapters; img_text has none");
    if (!model.has_modality(m))
      throw ConfigError(std::string("modality '") + modality_name(m) +
                        "' is not registered in the checkpoint");
    keys.insert(std::string("adapters.") + modality_name(m) + ".");
  }

  StageResult res;
  if (cfg.train.total_steps > 0) {
    auto data = load_split(args.dataset_root, "train");
    TrainConfig tc = cfg.train;
    tc.modality_order = order;
    res = run_stage(model, tc, order, data,
                    [keys](const std::string& n) {
                      for (const std::string& k : keys)
                        if (starts_with(n, k)) return true;
                      return false;
                    },
                    /*lm_stage=*/false, /*augment=*/true, args.out, log);
  }
  mark_adapters_live(model);
  ensure_parent_dir(args.out);
  save_checkpoint(model, args.out);
  json j = base_summary(args, cfg);
  j["steps"] = res.steps;
  j["final_loss"] = res.final_total;
  json mods = json::array();
  for (Modality m : order) mods.push_back(modality_name(m));
  j["modalities"] = mods;
  return j;
}

json cmd_eval(const CliArgs& args, const RunConfig& cfg, std::ostream& log) {
  require_flag(args.checkpoint, "--checkpoint", "eval");
  require_flag(args.dataset_root, "--dataset-root", "eval");
  Modality m = args.modality.empty() ? Modality::img_text : single_modality(args);
  Model model = Model::create(cfg.model, cfg.seed);
  load_checkpoint(model, args.checkpoint);
  std::vector<Sample> samples = read_dataset(args.dataset_root, cfg.split);
  log << "evaluating " << modality_name(m) << " on split '" << cfg.split << "'\n";
  EvalReport report =
      evaluate(model, samples, cfg.split, m, cfg.seed, cfg.train.use_pafe);
  const std::string line = eval_report_json(report);
  if (!args.out.empty()) {
    ensure_parent_dir(args.out);
    std::ofstream out(args.out, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write report '" + args.out + "'");
    out << line << "\n";
  }
  json j = json::parse(line);
  j["command"] = args.command;
  if (!args.out.empty()) j["out"] = args.out;
  return j;
}

json cmd_mine_regions(const CliArgs& args, const RunConfig& cfg, std::ostream& log) {
  require_flag(args.out, "--out", "mine-regions");
  require_flag(args.dataset_root, "--dataset-root", "mine-regions");
  FilterConfig fc;
  fc.tau = cfg.tau;
  log << "mining regions from split '" << cfg.mine_split << "' (tau " << fc.tau
      << ")\n";
  MineStats stats = mine_regions(args.dataset_root, cfg.mine_split, args.out, fc,
                                 default_segmenter(cfg.min_area_fraction));
  json j = json::parse(mine_stats_json(stats));
  j["command"] = args.command;
  j["out"] = args.out;
  return j;
}

}  // namespace

RunConfig resolve_config(const CliArgs& args) {
  RunConfig cfg =
      args.config_path.empty() ? RunConfig{} : load_run_config(args.config_path);
  if (args.seed) {
    if (*args.seed < 0) throw ConfigError("--seed must be non-negative");
    cfg.seed = static_cast<u64>(*args.seed);
  }
  cfg.train.seed = cfg.seed;
  if (args.steps) {
    if (*args.steps < 0) throw ConfigError("--steps must be non-negative");
    cfg.train.total_steps = *args.steps;
    // Short overriding runs keep a valid schedule without editing the file.
    if (cfg.train.warmup_steps >= cfg.train.total_steps)
      cfg.train.warmup_steps = std::max(0, cfg.train.total_steps - 1);
  }
  if (args.lambda) {
    if (*args.lambda < 0) throw ConfigError("--lambda must be non-negative");
    cfg.train.lambda = *args.lambda;
  }
  if (args.no_pafe) cfg.train.use_pafe = false;
  return cfg;
}

nlohmann::json run_cli(const CliArgs& args, std::ostream& log) {
  RunConfig cfg = resolve_config(args);
  if (args.command == "gen-data") return cmd_gen_data(args, cfg, log);
  if (args.command == "pretrain-lm") return cmd_pretrain_lm(args, cfg, log);
  if (args.command == "pretrain-base") return cmd_pretrain_base(args, cfg, log);
  if (args.command == "extend") return cmd_extend(args, cfg, log);
  if (args.command == "pretrain") return cmd_pretrain(args, cfg, log);
  if (args.command == "eval") return cmd_eval(args, cfg, log);
  if (args.command == "mine-regions") return cmd_mine_regions(args, cfg, log);
  throw ConfigError("unknown command '" + args.command + "'");
}

}  // namespace ralign
