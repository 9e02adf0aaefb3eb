// Command line front end: decoding, corpus curation and inspection, the
// synthetic step-count benchmark, and weight-file creation.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aspd/corpus.hpp"
#include "aspd/engine.hpp"
#include "aspd/errors.hpp"
#include "aspd/metrics.hpp"
#include "aspd/model.hpp"
#include "aspd/tokenizer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) {
    return *flag;
  }
  if (const char* env = std::getenv("ASPD_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw aspd::ConfigError("ASPD_SEED is not a number: " +
                              std::string(env));
    }
  }
  return 0;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw aspd::ConfigError("cannot open " + path);
  }
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

// Decoded text is raw bytes and need not be valid UTF-8 (a toy model samples
// arbitrary byte tokens); replace bad sequences with U+FFFD instead of
// throwing so the CLI always emits well-formed JSON.
std::string dump_json(const nlohmann::ordered_json& j, int indent = -1) {
  return j.dump(indent, ' ', false,
                nlohmann::ordered_json::error_handler_t::replace);
}

void write_json_line(std::ostream& out, const nlohmann::ordered_json& j) {
  out << dump_json(j) << "\n";
}

std::vector<aspd::CorpusSample> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw aspd::ConfigError("cannot open " + path);
  }
  std::vector<aspd::CorpusSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    try {
      samples.push_back(aspd::CorpusSample::from_json_line(line));
    } catch (const aspd::Error& e) {
      throw aspd::ValidationError(path + ":" + std::to_string(line_no) + ": " +
                                  e.what());
    }
  }
  return samples;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw aspd::ConfigError("cannot write " + path);
  }
  return out;
}

// Shared decode options wired onto a subcommand.
struct DecodeOptions {
  std::string script_path;
  std::string weights_path;
  std::string prompt;
  bool greedy = false;
  float temperature = 0.7f;
  int top_k = 20;
  float top_p = 0.8f;
  std::optional<std::uint64_t> seed;
  std::string visibility = "independent";
  std::string positions = "same-seq";
  int max_total_tokens = 1024;
  int max_branch_tokens = 256;
  int max_titles = 8;
  bool timings = false;
  bool pretty = false;
  bool throughput = false;
};

void add_decode_options(CLI::App* cmd, DecodeOptions& opt) {
  cmd->add_option("--scripted", opt.script_path,
                  "Script JSON with prompt and tagged response: the decoder "
                  "replays it instead of sampling freely");
  cmd->add_option("--weights", opt.weights_path, "Model weight file");
  cmd->add_option("--prompt", opt.prompt, "Prompt text (free decoding)");
  cmd->add_flag("--greedy", opt.greedy, "Pick the best token instead of "
                "sampling");
  cmd->add_option("--temperature", opt.temperature, "Sampling temperature")
      ->capture_default_str();
  cmd->add_option("--top-k", opt.top_k, "Keep only the k best tokens")
      ->capture_default_str();
  cmd->add_option("--top-p", opt.top_p, "Nucleus probability mass")
      ->capture_default_str();
  cmd->add_option("--seed", opt.seed,
                  "Sampler seed (default: ASPD_SEED env, then 0)");
  cmd->add_option("--visibility", opt.visibility,
                  "Branch visibility: independent or shared")
      ->capture_default_str();
  cmd->add_option("--positions", opt.positions,
                  "Position scheme: same-seq, same-max, same-rearrange or "
                  "fixed-interval-N")
      ->capture_default_str();
  cmd->add_option("--max-total-tokens", opt.max_total_tokens,
                  "Response token budget")
      ->capture_default_str();
  cmd->add_option("--max-branch-tokens", opt.max_branch_tokens,
                  "Per-branch token cap")
      ->capture_default_str();
  cmd->add_option("--max-titles", opt.max_titles, "Titles per group cap")
      ->capture_default_str();
  cmd->add_flag("--timings", opt.timings,
                "Include wall-clock seconds in the output");
  cmd->add_flag("--pretty", opt.pretty, "Indent the JSON output");
  cmd->add_flag("--throughput", opt.throughput,
                "Append derived throughput metrics");
}

int run_decode(const DecodeOptions& opt) {
  aspd::EngineConfig ecfg;
  ecfg.max_total_tokens = opt.max_total_tokens;
  ecfg.max_branch_tokens = opt.max_branch_tokens;
  ecfg.max_titles = opt.max_titles;
  if (opt.visibility == "independent") {
    ecfg.visibility = aspd::VisibilityMode::Independent;
  } else if (opt.visibility == "shared") {
    ecfg.visibility = aspd::VisibilityMode::Shared;
  } else {
    throw aspd::ConfigError("unknown visibility: " + opt.visibility);
  }
  ecfg.positions = aspd::PositionScheme::parse(opt.positions);

  aspd::SamplerConfig scfg;
  scfg.mode = opt.greedy ? aspd::SamplerConfig::Mode::Greedy
                         : aspd::SamplerConfig::Mode::Stochastic;
  scfg.temperature = opt.temperature;
  scfg.top_k = opt.top_k;
  scfg.top_p = opt.top_p;
  scfg.seed = resolve_seed(opt.seed);

  std::unique_ptr<aspd::Model> model;
  if (!opt.weights_path.empty()) {
    model = std::make_unique<aspd::Model>(aspd::Model::load(opt.weights_path));
  }
  aspd::ByteTokenizer tokenizer(model ? model->config().vocab_size
                                      : aspd::ByteTokenizer::kMinVocab);

  std::unique_ptr<aspd::GenerativePolicy> policy;
  std::string prompt_text;
  if (!opt.script_path.empty()) {
    nlohmann::json script = nlohmann::json::parse(read_file(opt.script_path));
    prompt_text = script.at("prompt").get<std::string>();
    aspd::StructuredResponse response =
        aspd::parse_tagged(script.at("response").get<std::string>());
    std::unique_ptr<aspd::GenerativePolicy> inner;
    if (model) {
      inner = std::make_unique<aspd::ModelPolicy>(*model);
    }
    policy = std::make_unique<aspd::ScriptedPolicy>(
        response, tokenizer, tokenizer.encode(prompt_text).size(),
        std::move(inner));
  } else {
    if (!model) {
      throw aspd::ConfigError("decode needs --scripted and/or --weights");
    }
    if (opt.prompt.empty()) {
      throw aspd::ConfigError("free decoding needs --prompt");
    }
    prompt_text = opt.prompt;
    policy = std::make_unique<aspd::ModelPolicy>(*model);
  }

  std::vector<int> prompt = tokenizer.encode(prompt_text);
  aspd::DecodeResult result = aspd::decode(*policy, prompt, ecfg, scfg);
  nlohmann::ordered_json out = result.to_json(opt.timings);
  if (opt.throughput) {
    out["throughput"] = aspd::throughput_metrics(result).to_json();
  }
  std::cout << dump_json(out, opt.pretty ? 2 : -1) << "\n";
  return kExitOk;
}

int run_corpus_validate(const std::string& in_path) {
  std::vector<aspd::CorpusSample> samples = load_corpus(in_path);
  for (const aspd::CorpusSample& sample : samples) {
    nlohmann::ordered_json j;
    j["id"] = sample.id;
    try {
      aspd::StructuredResponse response = aspd::parse_tagged(sample.response);
      aspd::ValidationReport report = aspd::validate_integrity(response);
      nlohmann::ordered_json issues = nlohmann::ordered_json::array();
      for (const aspd::GroupVerdict& g : report.groups) {
        if (g.verdict != aspd::Verdict::Pass) {
          issues.push_back({{"group", g.group_index}, {"reason", g.reason}});
        }
      }
      j["ok"] = issues.empty();
      j["groups"] = response.group_count();
      j["issues"] = std::move(issues);
    } catch (const aspd::ParseError& e) {
      j["ok"] = false;
      j["groups"] = 0;
      j["issues"] = nlohmann::ordered_json::array(
          {{{"group", nullptr}, {"reason", e.what()}}});
    }
    write_json_line(std::cout, j);
  }
  return kExitOk;
}

struct CurateOptions {
  std::string in_path;
  std::string out_parallel;
  std::string out_serial;
  std::string out_report;
  aspd::PipelineConfig config;
};

int run_corpus_curate(const CurateOptions& opt) {
  std::vector<aspd::CorpusSample> samples = load_corpus(opt.in_path);
  aspd::MockJudge judge;
  aspd::PipelineOutcome outcome =
      aspd::run_pipeline(samples, judge, opt.config);

  if (!opt.out_parallel.empty()) {
    std::ofstream out = open_out(opt.out_parallel);
    for (const aspd::CuratedSample& s : outcome.samples) {
      write_json_line(out, s.to_json());
    }
  }
  if (!opt.out_serial.empty()) {
    std::ofstream out = open_out(opt.out_serial);
    for (const aspd::CuratedSample& s : outcome.samples) {
      write_json_line(out, s.serial_to_json());
    }
  }
  nlohmann::ordered_json report = outcome.report();
  if (!opt.out_report.empty()) {
    std::ofstream out = open_out(opt.out_report);
    out << dump_json(report, 2) << "\n";
  } else {
    std::cout << dump_json(report, 2) << "\n";
  }
  return kExitOk;
}

int run_corpus_stats(const std::string& in_path, bool token_weighted) {
  std::vector<aspd::CorpusSample> samples = load_corpus(in_path);
  aspd::ByteTokenizer tokenizer;
  aspd::MetricsOptions options;
  options.token_weighted_abn = token_weighted;
  std::vector<aspd::SampleMetrics> metrics;
  metrics.reserve(samples.size());
  for (const aspd::CorpusSample& sample : samples) {
    metrics.push_back(aspd::sample_metrics(aspd::parse_tagged(sample.response),
                                           tokenizer, options));
  }
  std::cout << dump_json(aspd::corpus_metrics(metrics).to_json(), 2) << "\n";
  return kExitOk;
}

int run_corpus_emit_training(const std::string& in_path,
                             const std::string& visibility) {
  aspd::VisibilityMode mode;
  if (visibility == "independent") {
    mode = aspd::VisibilityMode::Independent;
  } else if (visibility == "shared") {
    mode = aspd::VisibilityMode::Shared;
  } else {
    throw aspd::ConfigError("unknown visibility: " + visibility);
  }
  std::vector<aspd::CorpusSample> samples = load_corpus(in_path);
  aspd::ByteTokenizer tokenizer;
  for (const aspd::CorpusSample& sample : samples) {
    aspd::StructuredResponse response = aspd::parse_tagged(sample.response);
    aspd::TrainingExample example =
        aspd::emit_training_layout(response, tokenizer, mode);
    nlohmann::ordered_json j = example.to_json();
    j["id"] = sample.id;
    write_json_line(std::cout, j);
  }
  return kExitOk;
}

// Builds a response with one group of `branches` equal-length branches of
// roughly `length` tokens each, and replays it through the decoder.
int run_bench(int max_branches, const std::vector<int>& lengths) {
  aspd::ByteTokenizer tokenizer;
  std::cout << "branches,branch_tokens,sampled_tokens,sampled_steps,"
               "step_speedup\n";
  for (int k = 2; k <= max_branches; ++k) {
    for (int length : lengths) {
      aspd::StructuredResponse response;
      aspd::ParallelGroup group;
      for (int b = 0; b < k; ++b) {
        std::string title = "T" + std::to_string(b + 1);  // equal lengths
        std::string body(static_cast<std::size_t>(length), 'a' + b % 26);
        group.titles.push_back(title);
        group.branches.push_back(title + ": " + body);
      }
      response.push_group(std::move(group));

      std::string prompt = "bench";
      aspd::ScriptedPolicy policy(response, tokenizer,
                                  tokenizer.encode(prompt).size());
      aspd::EngineConfig ecfg;
      ecfg.max_total_tokens = 1 << 20;
      ecfg.max_branch_tokens = 1 << 20;
      aspd::SamplerConfig scfg;
      scfg.mode = aspd::SamplerConfig::Mode::Greedy;
      aspd::DecodeResult result =
          aspd::decode(policy, tokenizer.encode(prompt), ecfg, scfg);
      aspd::ThroughputMetrics t = aspd::throughput_metrics(result);
      std::cout << k << "," << length << "," << t.sampled_tokens << ","
                << t.sampled_steps << "," << t.step_speedup << "\n";
    }
  }
  return kExitOk;
}

struct InitModelOptions {
  std::string out_path;
  aspd::ModelConfig config;
  std::optional<std::uint64_t> seed;
};

int run_init_model(const InitModelOptions& opt) {
  aspd::ModelConfig config = opt.config;
  if (opt.seed) {
    config.seed = *opt.seed;
  }
  config.validate();
  aspd::Model model(config);
  model.save(opt.out_path);
  std::cout << "wrote " << opt.out_path << " (checksum "
            << model.weight_checksum() << ")\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid serial-parallel decoding toolkit"};
  app.require_subcommand(1);

  DecodeOptions decode_opt;
  CLI::App* decode_cmd =
      app.add_subcommand("decode", "Decode a prompt or replay a script");
  add_decode_options(decode_cmd, decode_opt);

  CLI::App* corpus_cmd =
      app.add_subcommand("corpus", "Corpus curation and inspection");
  corpus_cmd->require_subcommand(1);

  std::string validate_in;
  CLI::App* validate_cmd = corpus_cmd->add_subcommand(
      "validate", "Check tagged responses line by line");
  validate_cmd->add_option("input", validate_in, "Corpus JSONL")->required();

  CurateOptions curate_opt;
  CLI::App* curate_cmd = corpus_cmd->add_subcommand(
      "curate", "Run the rewriting and verification pipeline");
  curate_cmd->add_option("input", curate_opt.in_path, "Corpus JSONL")
      ->required();
  curate_cmd->add_option("--out-parallel", curate_opt.out_parallel,
                         "Curated JSONL output path");
  curate_cmd->add_option("--out-serial", curate_opt.out_serial,
                         "Serial-twin JSONL output path");
  curate_cmd->add_option("--report", curate_opt.out_report,
                         "Report JSON output path (default stdout)");
  curate_cmd
      ->add_option("--candidates", curate_opt.config.rewrite_candidates,
                   "Rewrite candidates per sample")
      ->capture_default_str();
  curate_cmd
      ->add_option("--votes", curate_opt.config.judge_samples,
                   "Judge votes per decision")
      ->capture_default_str();
  curate_cmd
      ->add_option("--retries", curate_opt.config.max_retries,
                   "Judge transport retries")
      ->capture_default_str();

  std::string stats_in;
  bool stats_weighted = false;
  CLI::App* stats_cmd =
      corpus_cmd->add_subcommand("stats", "Aggregate parallelism metrics");
  stats_cmd->add_option("input", stats_in, "Corpus JSONL")->required();
  stats_cmd->add_flag("--token-weighted-abn", stats_weighted,
                      "Weight branch counts by stage tokens");

  std::string training_in;
  std::string training_visibility = "independent";
  CLI::App* training_cmd = corpus_cmd->add_subcommand(
      "emit-training", "Emit tokens, positions, visibility and loss rows");
  training_cmd->add_option("input", training_in, "Corpus JSONL")->required();
  training_cmd
      ->add_option("--visibility", training_visibility,
                   "independent or shared")
      ->capture_default_str();

  int bench_branches = 4;
  std::vector<int> bench_lengths = {64, 128, 256, 512};
  CLI::App* bench_cmd = app.add_subcommand(
      "bench", "Step-count table for synthetic equal-length branches");
  bench_cmd->add_option("--max-branches", bench_branches, "Largest branch "
                        "count")
      ->capture_default_str();
  bench_cmd->add_option("--lengths", bench_lengths, "Branch body sizes");

  InitModelOptions init_opt;
  CLI::App* init_cmd =
      app.add_subcommand("init-model", "Write a randomly initialized model");
  init_cmd->add_option("--out", init_opt.out_path, "Weight file path")
      ->required();
  init_cmd->add_option("--seed", init_opt.seed, "Initialization seed");
  init_cmd->add_option("--layers", init_opt.config.layers, "Layer count")
      ->capture_default_str();
  init_cmd->add_option("--heads", init_opt.config.heads, "Attention heads")
      ->capture_default_str();
  init_cmd->add_option("--head-dim", init_opt.config.head_dim, "Head width")
      ->capture_default_str();
  init_cmd->add_option("--ffn-dim", init_opt.config.ffn_dim, "Feed-forward "
                       "width")
      ->capture_default_str();
  init_cmd->add_option("--vocab", init_opt.config.vocab_size, "Vocabulary "
                       "size")
      ->capture_default_str();
  init_cmd
      ->add_option("--max-positions", init_opt.config.max_positions,
                   "Rotary table size")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (decode_cmd->parsed()) {
      return run_decode(decode_opt);
    }
    if (validate_cmd->parsed()) {
      return run_corpus_validate(validate_in);
    }
    if (curate_cmd->parsed()) {
      return run_corpus_curate(curate_opt);
    }
    if (stats_cmd->parsed()) {
      return run_corpus_stats(stats_in, stats_weighted);
    }
    if (training_cmd->parsed()) {
      return run_corpus_emit_training(training_in, training_visibility);
    }
    if (bench_cmd->parsed()) {
      return run_bench(bench_branches, bench_lengths);
    }
    if (init_cmd->parsed()) {
      return run_init_model(init_opt);
    }
  } catch (const aspd::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
