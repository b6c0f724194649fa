#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "alct/alct.hpp"

namespace {

using namespace alct;
namespace fs = std::filesystem;
using nlohmann::json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path);
  out << text;
}

Corpus corpus_from_text(const std::string& text) {
  Corpus c;
  c.vocab_size = ByteTokenizer::kVocabSize;
  c.tokens.reserve(text.size());
  for (int id : ByteTokenizer::encode(text)) c.tokens.push_back(std::uint32_t(id));
  return c;
}

// Calls f with the checkpoint's model at its stored precision.
template <class F>
void with_model(const std::string& path, F&& f) {
  const auto ckpt = load_checkpoint(path);
  const auto config = ModelConfig::from(ckpt.header, "model.");
  if (config.precision == "float64") {
    f(load_model<double>(ckpt));
  } else {
    f(load_model<float>(ckpt));
  }
}

TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& overrides,
                              const std::string& resume) {
  auto kv = path.empty() ? KeyValues{} : KeyValues::load(path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + o);
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  auto config = TrainConfig::from(kv);
  if (!resume.empty()) config.resume = resume;
  return config;
}

template <class T>
int run_training(const TrainConfig& config, bool quiet) {
  auto trainer = Trainer<T>::from_config(config);
  if (!config.resume.empty()) {
    trainer.resume(config.resume);
    std::cerr << "resumed at step " << trainer.state().step << "\n";
  }
  trainer.run(true, [&](const TrainMetrics& m) {
    if (quiet) return;
    std::fprintf(stderr, "step %6lld  ce %.4f  adaptive %.4f  prune %.3f  mean_len %.2f  lr %.2e", m.step, m.ce,
                 m.adaptive, m.prune_ratio, m.mean_len, m.lr);
    if (m.eval_ce) std::fprintf(stderr, "  eval_ce %.4f", *m.eval_ce);
    std::fprintf(stderr, "\n");
  });
  const auto e = trainer.evaluate_held_out();
  json out{{"steps", trainer.state().step},
           {"tokens", trainer.state().tokens_seen},
           {"flops_cum", trainer.state().flops_cum},
           {"eval_ce", e.ce},
           {"eval_ppl", e.ppl},
           {"prune_ratio", e.prune_ratio},
           {"mean_len", e.mean_len},
           {"checkpoint", (fs::path(config.out_dir) / "final.alck").string()}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

json curves_json(const std::vector<analysis::LengthGroup>& groups,
                 const std::vector<analysis::DifficultyBucket>& buckets) {
  json g = json::array(), b = json::array();
  for (const auto& x : groups) {
    g.push_back({{"latent_length", x.latent_length}, {"count", x.count}, {"mean_p_target", x.mean_p_target}});
  }
  for (const auto& x : buckets) {
    b.push_back({{"ce_lo", x.lo}, {"ce_hi", x.hi}, {"count", x.count}, {"mean_latent_length", x.mean_latent_length}});
  }
  auto finite_or_null = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"length_vs_p_target", g},
          {"difficulty_vs_length", b},
          {"spearman_length_p_target", finite_or_null(analysis::length_ptarget_correlation(groups))},
          {"spearman_difficulty_length", finite_or_null(analysis::difficulty_length_correlation(buckets))}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive latent chain-of-thought language model"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train a model from a key = value config file");
  std::string config_path, resume;
  std::vector<std::string> overrides;
  bool quiet = false;
  train->add_option("--config", config_path, "Config file")->check(CLI::ExistingFile);
  train->add_option("--set", overrides, "Override a config key (key=value), repeatable");
  train->add_option("--resume", resume, "Checkpoint to continue from");
  train->add_flag("--quiet", quiet, "No progress lines");

  // eval
  auto* eval = app.add_subcommand("eval", "Held-out cross-entropy of a checkpoint");
  std::string ckpt, corpus_path;
  int seq_len = 0;
  std::size_t windows = 0;
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--corpus", corpus_path, "Corpus file")->required()->check(CLI::ExistingFile);
  eval->add_option("--seq-len", seq_len, "Window length (default: model max_seq_len)");
  eval->add_option("--windows", windows, "Maximum number of windows (0: all)");
  bool vanilla = false;
  eval->add_flag("--vanilla", vanilla, "Evaluate the plain causal path (latent_max = 0 only)");

  // generate
  auto* gen = app.add_subcommand("generate", "Adaptive decoding from a text prompt");
  std::string prompt, trace_path;
  SamplingConfig sampling;
  double tau = 0.0;
  gen->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--prompt", prompt, "Prompt text")->required();
  gen->add_option("--max-new", sampling.max_new_tokens, "Tokens to generate")->check(CLI::NonNegativeNumber);
  gen->add_option("--temp", sampling.temperature, "Sampling temperature (0: greedy)")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", sampling.seed, "Sampling seed");
  gen->add_option("--tau", tau, "Truncation threshold (default: from the checkpoint)");
  gen->add_option("--trace", trace_path, "Write one JSON record per generated token");

  // probe
  auto* probe = app.add_subcommand("probe", "Next-step gain by confidence bucket");
  std::string out_path;
  int bins = 10, permutations = 1000;
  probe->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  probe->add_option("--corpus", corpus_path, "Corpus file")->required()->check(CLI::ExistingFile);
  probe->add_option("--out", out_path, "Output JSON file")->required();
  probe->add_option("--seq-len", seq_len, "Window length (default: model max_seq_len)");
  probe->add_option("--windows", windows, "Maximum number of windows (0: all)");
  probe->add_option("--bins", bins, "Equal-width confidence bins on [0, 1]")->check(CLI::PositiveNumber);
  probe->add_option("--permutations", permutations, "Permutation test draws (0: skip)");

  // report
  auto* report = app.add_subcommand("report", "Per-token latent length rendering");
  std::string text_file;
  bool no_ansi = false;
  report->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  report->add_option("--text-file", text_file, "Text to analyse")->required()->check(CLI::ExistingFile);
  report->add_option("--out", out_path, "Output HTML file")->required();
  report->add_flag("--no-ansi", no_ansi, "Do not print the colored terminal rendering");

  // curves
  auto* curves = app.add_subcommand("curves", "Latent length against confidence and difficulty");
  curves->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  curves->add_option("--corpus", corpus_path, "Corpus file")->required()->check(CLI::ExistingFile);
  curves->add_option("--out", out_path, "Output JSON file")->required();
  curves->add_option("--seq-len", seq_len, "Window length (default: model max_seq_len)");
  curves->add_option("--windows", windows, "Maximum number of windows (0: all)");
  curves->add_option("--bins", bins, "Logarithmic difficulty bins")->check(CLI::PositiveNumber);

  // tokenize
  auto* tokenize = app.add_subcommand("tokenize", "Byte-tokenize a text file into a corpus file");
  std::string in_path;
  tokenize->add_option("--in", in_path, "Text file")->required()->check(CLI::ExistingFile);
  tokenize->add_option("--out", out_path, "Corpus file")->required();

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic byte-level corpus");
  std::size_t bytes = 1 << 20;
  std::uint64_t synth_seed = 1;
  std::string text_out;
  synth->add_option("--bytes", bytes, "Corpus size in bytes")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--out", out_path, "Corpus file")->required();
  synth->add_option("--text-out", text_out, "Also write the raw text");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto config = load_train_config(config_path, overrides, resume);
      return config.model.precision == "float64" ? run_training<double>(config, quiet)
                                                 : run_training<float>(config, quiet);
    }
    if (*eval) {
      const auto corpus = read_corpus(corpus_path);
      with_model(ckpt, [&](const auto& model) {
        const int len = seq_len > 0 ? seq_len : model.config().max_seq_len;
        const auto e = evaluate(model, corpus, len, windows, 8, vanilla);
        std::cout << json{{"ce", e.ce}, {"ppl", e.ppl},           {"tokens", e.tokens},
                          {"mean_len", e.mean_len}, {"prune_ratio", e.prune_ratio}}
                         .dump(2)
                  << "\n";
      });
      return 0;
    }
    if (*gen) {
      with_model(ckpt, [&](const auto& model) {
        using T = typename std::decay_t<decltype(model)>::Scalar;
        std::optional<T> t;
        if (gen->count("--tau")) t = T(tau);
        const auto g = generate(model, ByteTokenizer::encode(prompt), sampling, t);
        std::cout << prompt << ByteTokenizer::decode(g.tokens) << "\n";
        std::fprintf(stderr, "generated %zu tokens, mean latent length %.3f\n", g.tokens.size(),
                     g.mean_latent_length());
        if (!trace_path.empty()) {
          std::ostringstream out;
          write_trace_jsonl(out, g.trace);
          write_file(trace_path, out.str());
        }
      });
      return 0;
    }
    if (*probe) {
      const auto corpus = read_corpus(corpus_path);
      with_model(ckpt, [&](const auto& model) {
        const int len = seq_len > 0 ? seq_len : model.config().max_seq_len;
        const auto reports = analysis::collect_reports(model, corpus, len, windows, 8, false);
        const auto result = analysis::probe_gain(reports, model.k_max(), analysis::linear_edges(0.0, 1.0, bins));
        auto j = result.to_json();
        j["tokens"] = reports.size();
        if (permutations > 0) j["permutation_p_value"] = analysis::gain_permutation_p_value(result, permutations);
        write_file(out_path, j.dump(2) + "\n");
      });
      return 0;
    }
    if (*report) {
      with_model(ckpt, [&](const auto& model) {
        const auto cs = analysis::case_study(model, ByteTokenizer::encode(read_file(text_file)));
        write_file(out_path, analysis::html_report(cs));
        if (!no_ansi) std::cout << analysis::ansi_report(cs);
      });
      return 0;
    }
    if (*curves) {
      const auto corpus = read_corpus(corpus_path);
      with_model(ckpt, [&](const auto& model) {
        const int len = seq_len > 0 ? seq_len : model.config().max_seq_len;
        const auto reports = analysis::collect_reports(model, corpus, len, windows, 8, true);
        const auto j = curves_json(analysis::length_vs_ptarget(reports), analysis::difficulty_buckets(reports, bins));
        write_file(out_path, j.dump(2) + "\n");
        std::cout << j.dump(2) << "\n";
      });
      return 0;
    }
    if (*tokenize) {
      const auto c = corpus_from_text(read_file(in_path));
      write_corpus(out_path, c);
      std::cerr << c.size() << " tokens\n";
      return 0;
    }
    if (*synth) {
      const auto text = synthetic_text(bytes, synth_seed);
      write_corpus(out_path, corpus_from_text(text));
      if (!text_out.empty()) write_file(text_out, text);
      return 0;
    }
  } catch (const alct::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
