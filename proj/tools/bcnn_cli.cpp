// bcnn: command-line front end for the binarized polyp-frame classifier.
//
// Exit status: 0 success, 1 unexpected failure, 2 usage error,
// 3 data/format error, 4 training divergence.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "bcnn/bcnn.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 15];
  }
  return out;
}

std::string file_digest(const fs::path& p) { return sha256_hex(bcnn::read_file(p)); }

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_real(*v) : "undefined"; }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

fs::path default_root(const fs::path& manifest, const std::string& root) {
  if (!root.empty()) return root;
  const auto parent = manifest.parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

// A loaded model of either kind. Binarized models only ever run through
// the packed path.
struct AnyModel {
  bcnn::ModelFormat format = bcnn::ModelFormat::kFloat;
  std::optional<bcnn::FloatModel> fp;
  std::optional<bcnn::BinarizedModel> bin;
  std::vector<std::uint8_t> bytes;

  const bcnn::NetworkSpec& spec() const { return fp ? fp->params.spec : bin->network.spec; }
  const std::optional<bcnn::ModelMetadata>& metadata() const { return fp ? fp->metadata : bin->metadata; }

  bcnn::PackedPrediction predict(const bcnn::Tensor4<double>& batch) const {
    if (bin) return bcnn::packed_forward(bin->network, batch);
    const auto logits = bcnn::forward(fp->params, batch);
    return {logits.cast<float>(), bcnn::argmax_labels(logits), bcnn::softmax(logits)};
  }
};

AnyModel load_any(const fs::path& path) {
  AnyModel m;
  try {
    m.bytes = bcnn::read_file(path);
  } catch (const bcnn::DataError& e) {
    throw bcnn::FormatError(bcnn::FormatError::Kind::kIo, e.what());
  }
  const auto fmt = bcnn::sniff_format(m.bytes);
  if (!fmt) {
    throw bcnn::FormatError(bcnn::FormatError::Kind::kBadMagic,
                            "`" + path.string() + "` is not a model file (unknown magic)");
  }
  m.format = *fmt;
  if (*fmt == bcnn::ModelFormat::kFloat) {
    m.fp = bcnn::decode_float(m.bytes);
  } else {
    m.bin = bcnn::decode_binarized(m.bytes);
  }
  return m;
}

const char* format_name(bcnn::ModelFormat f) { return f == bcnn::ModelFormat::kFloat ? "float" : "binarized"; }

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t count = 0;
  double positive_frac = 0.5;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
  const auto m = bcnn::synth_generate(a.out, a.count, a.positive_frac, a.seed);
  const auto pos = m.count_label(1);
  if (pos == 0 || pos == m.size()) {
    std::cerr << "warning: corpus has a single class; it cannot be used for training\n";
  }
  const fs::path manifest = fs::path(a.out) / "manifest.csv";
  std::cout << "frames=" << m.size() << "\npositives=" << pos << "\nmanifest=" << manifest.string()
            << "\nmanifest_sha256=" << file_digest(manifest) << "\n";
  return kExitOk;
}

struct SplitArgs {
  std::string manifest;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  std::string train_out;
  std::string test_out;
};

int cmd_split(const SplitArgs& a) {
  const auto s = bcnn::split_and_shuffle(bcnn::load_manifest(a.manifest), a.seed, a.train_fraction);
  bcnn::write_manifest(a.train_out, s.train);
  bcnn::write_manifest(a.test_out, s.test);
  std::cout << "train=" << s.train.size() << "\ntest=" << s.test.size() << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string manifest;
  std::string root;
  std::string mode = "float";
  std::string alpha = "per-kernel";
  bcnn::TrainConfig cfg;
  std::string out;
  std::uint64_t log_every = 100;
  bool quiet = false;
};

int cmd_train(TrainArgs a) {
  a.cfg.mode = a.mode == "float" ? bcnn::TrainMode::kFloat : bcnn::TrainMode::kBinarized;
  a.cfg.alpha = a.alpha == "per-layer" ? bcnn::AlphaGranularity::kPerLayer : bcnn::AlphaGranularity::kPerKernel;
  a.cfg.validate();
  const fs::path manifest_path = a.manifest;
  const fs::path root = default_root(manifest_path, a.root);
  const fs::path out = a.out;
  const auto manifest = bcnn::load_manifest(manifest_path);

  const auto spec = bcnn::NetworkSpec::canonical();
  auto save = [&](const fs::path& path, const bcnn::Checkpoint& c) {
    const bcnn::ModelMetadata meta{c.iteration, a.cfg.seed, c.config.echo()};
    bcnn::save_float(path, c.params, meta);
    if (a.cfg.mode == bcnn::TrainMode::kBinarized) {
      fs::path bin = path;
      bin += ".bin";
      // Binarize the stored f32 weights so `binarize` on PATH reproduces PATH.bin.
      const auto stored = bcnn::decode_float(bcnn::encode_float(c.params));
      bcnn::save_binarized(bin, bcnn::binarize_network(stored.params, a.cfg.alpha), meta);
    }
  };

  double window = 0.0;
  std::uint64_t window_n = 0;
  bcnn::TrainHooks hooks;
  hooks.on_step = [&](std::uint64_t it, double loss) {
    window += loss;
    ++window_n;
    if (!a.quiet && (it % a.log_every == 0 || it == a.cfg.iterations)) {
      std::fprintf(stderr, "iter %llu loss %.6f\n", static_cast<unsigned long long>(it),
                   window / static_cast<double>(window_n));
      window = 0.0;
      window_n = 0;
    }
  };
  hooks.on_checkpoint = [&](const bcnn::Checkpoint& c) {
    if (c.iteration % a.cfg.checkpoint_every != 0) return;
    fs::path p = out;
    p += ".ckpt-" + std::to_string(c.iteration);
    save(p, c);
  };

  const auto t0 = Clock::now();
  const auto result = bcnn::train_loop(bcnn::init_params(spec, a.cfg.seed), manifest, root, a.cfg, hooks);
  const double elapsed = seconds_since(t0);
  save(out, result.checkpoints.back());

  std::cout << "mode=" << bcnn::to_string(a.cfg.mode) << "\niterations=" << a.cfg.iterations
            << "\nfinal_loss=" << fmt_real(result.losses.back()) << "\nmodel=" << out.string() << "\n";
  if (a.cfg.mode == bcnn::TrainMode::kBinarized) std::cout << "packed_model=" << out.string() << ".bin\n";
  std::cout << "train_seconds=" << fmt_real(elapsed) << "\n";
  return kExitOk;
}

struct BinarizeArgs {
  std::string model;
  std::string out;
  std::string alpha = "per-kernel";
};

int cmd_binarize(const BinarizeArgs& a) {
  const auto fm = bcnn::load_float(a.model);
  const auto granularity =
      a.alpha == "per-layer" ? bcnn::AlphaGranularity::kPerLayer : bcnn::AlphaGranularity::kPerKernel;
  const auto net = bcnn::binarize_network(fm.params, granularity);
  const auto costs = bcnn::layer_costs(fm.params, net);
  bcnn::save_binarized(a.out, net, fm.metadata);
  double total = 0.0;
  std::size_t k = 0;
  for (const auto& r : fm.params.spec.resolve()) {
    if (!r.spec.has_params()) continue;
    std::cout << "layer" << k << "_" << bcnn::to_string(r.spec.kind) << "_cost=" << fmt_real(costs[k]) << "\n";
    total += costs[k++];
  }
  std::cout << "total_cost=" << fmt_real(total) << "\nout=" << a.out << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string model;
  std::string manifest;
  std::string root;
  std::string report;
  std::string predictions;
  std::size_t batch = 32;
};

int cmd_eval(const EvalArgs& a, const std::string& command) {
  const auto t_load = Clock::now();
  const AnyModel model = load_any(a.model);
  const fs::path manifest_path = a.manifest;
  const auto manifest = bcnn::load_manifest(manifest_path);
  if (manifest.empty()) throw bcnn::DataError("manifest is empty");
  const auto data = bcnn::load_frames(manifest, default_root(manifest_path, a.root));
  const double load_s = seconds_since(t_load);

  const auto t_eval = Clock::now();
  std::vector<int> predicted;
  std::vector<double> p_positive;
  std::vector<bcnn::Tensor4<double>> chunk;
  for (std::size_t start = 0; start < data.size(); start += a.batch) {
    chunk.clear();
    const std::size_t end = std::min(data.size(), start + a.batch);
    for (std::size_t i = start; i < end; ++i) chunk.push_back(bcnn::resize_to_input(data.frames[i]));
    const auto pred = model.predict(bcnn::stack<double>(chunk));
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
      predicted.push_back(pred.labels[i]);
      p_positive.push_back(pred.probabilities[2 * i + 1]);
    }
  }
  const double eval_s = seconds_since(t_eval);
  const auto counts = bcnn::accumulate(predicted, data.labels);
  const auto m = bcnn::compute_metrics(counts);

  if (!a.predictions.empty()) {
    std::ofstream p(a.predictions);
    if (!p) throw bcnn::DataError("cannot write `" + a.predictions + "`");
    p << "path,label,predicted,p_positive\n";
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      p << data.paths[i] << ',' << data.labels[i] << ',' << predicted[i] << ',' << fmt_real(p_positive[i]) << '\n';
    }
  }

  const auto& meta = model.metadata();
  json j;
  j["command"] = command;
  j["model"] = {{"path", a.model},
                {"format", format_name(model.format)},
                {"sha256", sha256_hex(model.bytes)},
                {"bytes", model.bytes.size()}};
  j["manifest"] = {{"path", a.manifest}, {"sha256", file_digest(manifest_path)}, {"frames", manifest.size()}};
  j["seed"] = meta ? json(meta->seed) : json(nullptr);
  j["training_config"] = meta ? json(meta->config) : json(nullptr);
  j["counts"] = {{"tp", counts.tp}, {"fp", counts.fp}, {"tn", counts.tn}, {"fn", counts.fn}};
  j["metrics"] = {{"accuracy", m.accuracy},       {"recall", opt_json(m.recall)},
                  {"precision", opt_json(m.precision)}, {"specificity", opt_json(m.specificity)},
                  {"dice", opt_json(m.dice)},     {"fppf", m.fppf}};
  j["timing_seconds"] = {{"load", load_s}, {"evaluate", eval_s}};
  if (!a.report.empty()) {
    std::ofstream r(a.report);
    if (!r) throw bcnn::DataError("cannot write `" + a.report + "`");
    r << j.dump(2) << '\n';
  }

  std::cout << "model_format=" << format_name(model.format) << "\nframes=" << counts.total() << "\ntp=" << counts.tp
            << "\nfp=" << counts.fp << "\ntn=" << counts.tn << "\nfn=" << counts.fn
            << "\naccuracy=" << fmt_real(m.accuracy) << "\nrecall=" << fmt_opt(m.recall)
            << "\nprecision=" << fmt_opt(m.precision) << "\nspecificity=" << fmt_opt(m.specificity)
            << "\ndice=" << fmt_opt(m.dice) << "\nfppf=" << fmt_real(m.fppf) << "\n";
  return kExitOk;
}

struct InferArgs {
  std::string model;
  std::string image;
};

int cmd_infer(const InferArgs& a) {
  const AnyModel model = load_any(a.model);
  const auto x = bcnn::resize_to_input(bcnn::read_image(a.image));
  const auto pred = model.predict(x);
  std::cout << "label=" << pred.labels[0] << "\np0=" << fmt_real(pred.probabilities[0])
            << "\np1=" << fmt_real(pred.probabilities[1]) << "\n";
  return kExitOk;
}

struct BenchArgs {
  std::string model;
  std::size_t batches = 5;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& a) {
  const AnyModel model = load_any(a.model);
  const auto& spec = model.spec();
  const bcnn::PackedNetwork packed =
      model.bin ? model.bin->network : bcnn::to_packed(bcnn::binarize_network(model.fp->params));
  const bcnn::NetworkParams dense =
      model.fp ? model.fp->params : bcnn::effective_params(bcnn::to_binarized(packed));
  std::vector<bcnn::ConvParams<float>> dense_f;
  for (const auto& l : dense.layers) dense_f.push_back(l.cast<float>());

  auto rng = bcnn::make_rng(a.seed, bcnn::Stream::kBench);
  std::vector<bcnn::Tensor4<double>> inputs;
  for (std::size_t b = 0; b < a.batches; ++b) {
    bcnn::Tensor4<double> t(spec.input_shape(a.batch_size));
    for (auto& v : t.values()) v = bcnn::uniform01(rng);
    inputs.push_back(std::move(t));
  }
  const double samples = static_cast<double>(a.batches * a.batch_size);
  auto time_it = [&](auto&& fn) {
    const auto t0 = Clock::now();
    for (const auto& x : inputs) fn(x);
    return 1e3 * seconds_since(t0) / samples;
  };
  const double ms_dense_double = time_it([&](const auto& x) { (void)bcnn::forward(dense, x); });
  const double ms_dense_float = time_it([&](const auto& x) {
    (void)bcnn::forward<float>(spec, dense_f, x.template cast<float>());
  });
  const double ms_packed = time_it([&](const auto& x) { (void)bcnn::packed_forward(packed, x); });
  const auto ops = bcnn::op_count_report(packed);

  std::cout << "# measurements; wall time depends on the host\n"
            << "samples=" << static_cast<std::size_t>(samples) << "\nms_per_sample_dense_double="
            << fmt_real(ms_dense_double) << "\nms_per_sample_dense_float=" << fmt_real(ms_dense_float)
            << "\nms_per_sample_packed=" << fmt_real(ms_packed)
            << "\nspeedup_packed_vs_dense_float=" << fmt_real(ms_dense_float / ms_packed)
            << "\nmultiplies_dense=" << ops.multiplies_dense << "\nmultiplies_packed=" << ops.multiplies_packed
            << "\naddsubs_packed=" << ops.addsubs << "\n";
  return kExitOk;
}

struct InspectArgs {
  std::string model;
  std::string other;
};

void print_layers(const AnyModel& m) {
  std::cout << "format=" << format_name(m.format) << "\nfile_bytes=" << m.bytes.size()
            << "\nsha256=" << sha256_hex(m.bytes) << "\n";
  const auto& spec = m.spec();
  std::cout << "input=" << spec.in_channels << "x" << spec.in_height << "x" << spec.in_width << "\n";
  std::printf("%-5s %-16s %-14s %10s\n", "index", "type", "output", "params");
  std::size_t weights = 0, biases = 0;
  for (std::size_t i = 0; const auto& r : spec.resolve()) {
    std::size_t n = 0;
    if (r.spec.has_params()) {
      n = r.out.c * (r.in_channels * r.kernel_h * r.kernel_w + 1);
      weights += r.out.c * r.in_channels * r.kernel_h * r.kernel_w;
      biases += r.out.c;
    }
    const std::string shape = std::to_string(r.out.c) + "x" + std::to_string(r.out.h) + "x" + std::to_string(r.out.w);
    std::printf("%-5zu %-16s %-14s %10zu\n", i++, bcnn::to_string(r.spec.kind), shape.c_str(), n);
  }
  std::fflush(stdout);
  std::cout << "weights=" << weights << "\nbiases=" << biases << "\n";
  if (const auto& meta = m.metadata()) {
    std::cout << "iteration=" << meta->iteration << "\nseed=" << meta->seed << "\nconfig=" << meta->config << "\n";
  }
}

int cmd_inspect(const InspectArgs& a) {
  const AnyModel m = load_any(a.model);
  print_layers(m);
  if (!a.other.empty()) {
    const AnyModel o = load_any(a.other);
    if (o.format == m.format) throw bcnn::DataError("--other must be the opposite model format");
    if (!(o.spec() == m.spec())) throw bcnn::DataError("the two models have different architectures");
    const auto& fp = m.format == bcnn::ModelFormat::kFloat ? m : o;
    const auto& bin = m.format == bcnn::ModelFormat::kFloat ? o : m;
    const auto r = bcnn::compression_report(fp.bytes, bin.bytes);
    std::cout << "float_bytes=" << r.float_bytes << "\nbinarized_bytes=" << r.bin_bytes
              << "\ncompression_ratio=" << fmt_real(r.ratio) << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binarized CNN polyp-frame classifier"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a seeded synthetic frame corpus with a manifest");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--count", synth.count, "Number of frames")->required()->check(CLI::Range(2, 100000000));
  s->add_option("--positive-frac", synth.positive_frac, "Fraction of frames with a polyp")->check(CLI::Range(0.0, 1.0));
  s->add_option("--seed", synth.seed, "Random seed");

  SplitArgs split;
  auto* sp = app.add_subcommand("split", "Seeded train/test split of a manifest");
  sp->add_option("--manifest", split.manifest, "Input manifest")->required()->check(CLI::ExistingFile);
  sp->add_option("--seed", split.seed, "Random seed");
  sp->add_option("--train-fraction", split.train_fraction, "Fraction of records used for training")
      ->check(CLI::Range(0.0, 1.0));
  sp->add_option("--train-out", split.train_out, "Training manifest to write")->required();
  sp->add_option("--test-out", split.test_out, "Held-out manifest to write")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train the canonical network with momentum SGD");
  t->add_option("--manifest", train.manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  t->add_option("--root", train.root, "Directory the manifest paths are relative to (default: its directory)");
  t->add_option("--mode", train.mode, "float or binarized")->check(CLI::IsMember({"float", "binarized"}));
  t->add_option("--alpha", train.alpha, "Scale granularity")->check(CLI::IsMember({"per-kernel", "per-layer"}));
  t->add_option("--iterations", train.cfg.iterations, "SGD iterations")->check(CLI::PositiveNumber);
  t->add_option("--lr", train.cfg.learning_rate, "Learning rate")->check(CLI::NonNegativeNumber);
  t->add_option("--momentum", train.cfg.momentum, "Momentum in [0, 1)");
  t->add_option("--batch", train.cfg.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  t->add_option("--seed", train.cfg.seed, "Seed for initialization and sampling order");
  t->add_option("--checkpoint-every", train.cfg.checkpoint_every, "Checkpoint interval")->check(CLI::PositiveNumber);
  t->add_option("--out", train.out, "Output model path")->required();
  t->add_option("--log-every", train.log_every, "Progress interval")->check(CLI::PositiveNumber);
  t->add_flag("--quiet", train.quiet, "Suppress progress output");

  BinarizeArgs binarize;
  auto* b = app.add_subcommand("binarize", "Convert a float model to a packed binarized model");
  b->add_option("--model", binarize.model, "Float model")->required();
  b->add_option("--out", binarize.out, "Binarized model to write")->required();
  b->add_option("--alpha", binarize.alpha, "Scale granularity")->check(CLI::IsMember({"per-kernel", "per-layer"}));

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a model on a labelled manifest");
  e->add_option("--model", eval.model, "Float or binarized model")->required();
  e->add_option("--manifest", eval.manifest, "Evaluation manifest")->required()->check(CLI::ExistingFile);
  e->add_option("--root", eval.root, "Directory the manifest paths are relative to (default: its directory)");
  e->add_option("--report", eval.report, "Structured JSON report to write");
  e->add_option("--predictions", eval.predictions, "Per-frame prediction CSV to write");
  e->add_option("--batch", eval.batch, "Inference batch size")->check(CLI::PositiveNumber);

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "Classify one image");
  i->add_option("--model", infer.model, "Float or binarized model")->required();
  i->add_option("--image", infer.image, "P5/P6 pixmap")->required();

  BenchArgs bench;
  auto* be = app.add_subcommand("bench", "Time dense and packed forward passes on random inputs");
  be->add_option("--model", bench.model, "Float or binarized model")->required();
  be->add_option("--batches", bench.batches, "Number of batches")->check(CLI::PositiveNumber);
  be->add_option("--batch-size", bench.batch_size, "Samples per batch")->check(CLI::PositiveNumber);
  be->add_option("--seed", bench.seed, "Seed for the random inputs");

  InspectArgs inspect;
  auto* in = app.add_subcommand("inspect", "Print the layer table, sizes and compression ratio");
  in->add_option("--model", inspect.model, "Model file")->required();
  in->add_option("--other", inspect.other, "Model of the opposite format for the compression ratio");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*sp) return cmd_split(split);
    if (*t) return cmd_train(train);
    if (*b) return cmd_binarize(binarize);
    if (*e) return cmd_eval(eval, join_args(argc, argv));
    if (*i) return cmd_infer(infer);
    if (*be) return cmd_bench(bench);
    if (*in) return cmd_inspect(inspect);
  } catch (const bcnn::DivergenceError& err) {
    std::cerr << "error: training diverged: " << err.what() << "\n";
    return kExitDivergence;
  } catch (const bcnn::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitOther;
  }
  return kExitUsage;
}
