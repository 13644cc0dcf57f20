#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mcsagan/engine.hpp"
#include "mcsagan/parallel.hpp"

using namespace mcsagan;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

Json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path);
  try {
    return Json::parse(is);
  } catch (const Json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const Json& j) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  os << j.dump(2) << '\n';
}

// Deterministic train/validation split of a dataset directory.
std::pair<std::vector<Sample>, std::vector<Sample>> split(std::vector<Sample> all, double val_fraction,
                                                          std::uint64_t seed) {
  if (val_fraction < 0 || val_fraction >= 1) throw std::invalid_argument("--val-fraction must lie in [0,1)");
  const std::size_t n_val = static_cast<std::size_t>(std::round(val_fraction * static_cast<double>(all.size())));
  std::vector<std::string> ids;
  for (const auto& s : all) ids.push_back(s.subject_id);
  const auto parts = dataset_split(ids, {all.size() - n_val, n_val}, seed);
  auto pick = [&](const std::vector<std::string>& want) {
    std::vector<Sample> out;
    for (const auto& id : want)
      for (const auto& s : all)
        if (s.subject_id == id) out.push_back(s);
    return out;
  };
  return {pick(parts[0]), pick(parts[1])};
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-contrast MRI synthesis with a segmentation-guided WGAN-GP"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker thread cap (overrides MCSAGAN_THREADS)")->check(CLI::PositiveNumber);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a seeded phantom dataset");
  std::string spec_path, out_dir;
  int count = 64;
  std::uint64_t seed = 0;
  gen->add_option("--spec", spec_path, "Phantom spec JSON (defaults when omitted)");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--count", count, "Number of subjects")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Seed of the first subject");

  // pretrain-seg
  auto* pre = app.add_subcommand("pretrain-seg", "Pretrain and freeze a tumour segmenter");
  std::string config_path, data_dir, out_path;
  double val_fraction = 0.125;
  bool downstream_variant = false;
  pre->add_option("--config", config_path, "Training config JSON (segmenter section)");
  pre->add_option("--data", data_dir, "Dataset directory")->required();
  pre->add_option("--out", out_path, "Output checkpoint")->required();
  pre->add_option("--val-fraction", val_fraction, "Held-out fraction");
  pre->add_flag("--downstream", downstream_variant,
                "Train the four-channel evaluation segmenter on real contrasts instead");

  // train
  auto* train = app.add_subcommand("train", "Adversarial training");
  std::string seg_path, resume_path;
  long long max_steps = -1;
  train->add_option("--config", config_path, "Training config JSON");
  train->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--seg", seg_path, "Frozen segmenter checkpoint (required unless use_seg is false)");
  train->add_option("--out", out_dir, "Output directory for checkpoints and the loss log")->required();
  train->add_option("--resume", resume_path, "Checkpoint to resume from");
  train->add_option("--max-steps", max_steps, "Override max_steps");
  train->add_option("--val-fraction", val_fraction, "Held-out fraction");

  // synth
  auto* syn = app.add_subcommand("synth", "Synthesize one contrast from a T2w volume");
  std::string ckpt_path, input_path, contrast_name_arg;
  syn->add_option("--ckpt", ckpt_path, "Training checkpoint")->required();
  syn->add_option("--input", input_path, "T2w MCSV1 volume")->required();
  syn->add_option("--contrast", contrast_name_arg, "Target contrast")
      ->required()
      ->check(CLI::IsMember({"t2f", "t1c", "t1n"}, CLI::ignore_case));
  syn->add_option("--out", out_path, "Output MCSV1 volume")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Fidelity metrics, MFD and downstream Dice");
  std::string report_path, downstream_path;
  ev->add_option("--ckpt", ckpt_path, "Training checkpoint")->required();
  ev->add_option("--data", data_dir, "Paired dataset directory")->required();
  ev->add_option("--report", report_path, "Output JSON report")->required();
  ev->add_option("--downstream", downstream_path,
                 "Four-channel segmenter checkpoint (pretrain-seg --downstream); Dice is null without it");

  // plan-attention
  auto* plan = app.add_subcommand("plan-attention", "Tabulate attention plans over a dims sweep");
  std::string dims_text;
  AttentionBudget budget;
  plan->add_option("--dims", dims_text, "DxHxW[,DxHxW...]");
  plan->add_option("--tq", budget.t_q, "Query token budget");
  plan->add_option("--tkv", budget.t_kv, "Key/value token budget");
  plan->add_option("--tattn", budget.t_attn, "Affinity element budget");
  plan->add_option("--kappa", budget.kappa, "Fail-safe factor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (threads > 0) set_thread_count(threads);

  try {
    if (*gen) {
      PhantomSpec spec;
      if (!spec_path.empty()) spec = phantom_spec_from_json(read_json(spec_path));
      std::vector<Sample> samples;
      for (int i = 0; i < count; ++i) {
        spec.seed = seed + static_cast<std::uint64_t>(i);
        samples.push_back(generate_phantom(spec));
      }
      fs::create_directories(out_dir);
      write_dataset(out_dir, samples);
      std::cout << "wrote " << count << " phantoms to " << out_dir << '\n';
    } else if (*pre) {
      const TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
      auto [tr, va] = split(read_dataset(data_dir), val_fraction, cfg.seg.seed);
      std::mt19937_64 rng(cfg.seg.seed);
      Segmenter<float> seg(cfg.seg.segmenter, rng);
      Timer timer;
      auto report = [&](const PretrainEpoch& e) {
        std::cout << Json{{"epoch", e.epoch}, {"loss", e.loss}, {"val_dice", e.val_dice},
                          {"seconds", timer.seconds()}}.dump()
                  << std::endl;
      };
      if (downstream_variant)
        train_downstream_segmenter(seg, tr, va, cfg.seg, report);
      else
        pretrain_segmenter(seg, tr, va, cfg.seg, report);
      if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
      save_segmenter(out_path, seg);
    } else if (*train) {
      TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
      if (max_steps >= 0) cfg.max_steps = max_steps;
      auto [tr, va] = split(read_dataset(data_dir), val_fraction, cfg.seed);
      std::shared_ptr<const Segmenter<float>> seg;
      if (!seg_path.empty()) seg = load_segmenter(seg_path);
      if (cfg.use_seg && !seg) throw std::invalid_argument("--seg is required when use_seg is true");
      fs::create_directories(out_dir);
      write_json(out_dir + "/config.json", to_json(cfg));
      GanTrainer trainer(cfg, std::move(tr), std::move(va), seg);
      if (!resume_path.empty()) trainer.load_checkpoint(resume_path);
      std::ofstream log(out_dir + "/log.jsonl", resume_path.empty() ? std::ios::trunc : std::ios::app);
      Timer timer;
      trainer.run(
          [&](const StepLog& s) {
            Json j = s.to_json();
            log << j.dump() << '\n';
            log.flush();
            j["seconds"] = timer.seconds();
            std::cout << j.dump() << std::endl;
          },
          out_dir);
      trainer.save_checkpoint(out_dir + "/last.ckpt");
    } else if (*syn) {
      const GeneratorBundle g = load_generator(ckpt_path);
      const Tensor<float> x = read_volume(input_path);
      write_volume(out_path, synthesize(*g.generator, x, parse_contrast(contrast_name_arg)));
    } else if (*ev) {
      const GeneratorBundle g = load_generator(ckpt_path);
      const std::vector<Sample> data = read_dataset(data_dir);
      std::unique_ptr<Segmenter<float>> seg4;
      if (!downstream_path.empty()) seg4 = load_segmenter(downstream_path);
      const FeatureExtractor<float> fx(g.config.features);
      const Json report = evaluate(data, generator_synthesizer(*g.generator), EvalOptions{seg4.get(), &fx});
      write_json(report_path, report);
      std::cout << report.dump(2) << '\n';
    } else if (*plan) {
      std::cout << plan_table(parse_dims_list(dims_text), budget);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
