// Acceptance checks: one PASS/FAIL line per criterion.
//
//   acceptance [--work-dir DIR] [--reuse-suite DIR] [--only N,N,...]
//
// Criteria 4-7 train the default suite for three seeds (about half an hour
// on one core); --reuse-suite analyzes a finished suite directory instead.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "srclab/contrib.hpp"
#include "srclab/gradcheck.hpp"
#include "srclab/ops.hpp"
#include "srclab/report.hpp"

using namespace srclab;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

const std::vector<ResidualVariant> kVariants{ResidualVariant::Standard, ResidualVariant::WeRC,
                                             ResidualVariant::WeRCNoNorm, ResidualVariant::WeRCNoWeights};

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, bool grad = true, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(std::move(shape), std::move(v), grad);
}

Tensor<double> weighted(Tape<double>& t, const Tensor<double>& y, const Tensor<double>& w) {
  return ops::sum(t, ops::mul(t, y, w));
}

SynthLanguageSpec tiny_language() {
  SynthLanguageSpec s;
  s.vocab_src = s.vocab_tgt = 16;
  s.min_len = 2;
  s.max_len = 6;
  s.seed = 21;
  return s;
}

FrameRenderSpec tiny_frames() {
  FrameRenderSpec f;
  f.feature_dim = 5;
  f.k_min = 1;
  f.k_max = 3;
  return f;
}

Model<double> tiny_model(TaskKind task, ResidualVariant v, std::size_t enc, std::size_t dec, std::uint64_t seed) {
  ModelConfig c;
  c.enc_layers = enc;
  c.dec_layers = dec;
  c.heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.residual = v;
  configure_for_task(c, task, tiny_language(), tiny_frames());
  return build_model<double>(c, seed);
}

// ---------------------------------------------------------------------------

Verdict criterion_gradients() {
  Verdict v;
  std::mt19937_64 rng(1);
  double worst_primitive = 0.0;
  using Builder = std::function<ScalarFn(std::vector<Tensor<double>>&)>;
  std::vector<std::pair<std::string, Builder>> prims;
  auto w_for = [&](Shape s) { return random_tensor(std::move(s), rng, false); };
  prims.push_back({"matmul", [&](auto& in) {
                     in = {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)};
                     auto w = w_for({3, 2});
                     return ScalarFn([=](Tape<double>& t) { return weighted(t, ops::matmul(t, in[0], in[1]), w); });
                   }});
  prims.push_back({"bmm", [&](auto& in) {
                     in = {random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng)};
                     auto w = w_for({2, 3, 5});
                     return ScalarFn([=](Tape<double>& t) { return weighted(t, ops::bmm(t, in[0], in[1], true), w); });
                   }});
  prims.push_back({"add", [&](auto& in) {
                     in = {random_tensor({3, 4}, rng), random_tensor({4}, rng)};
                     auto w = w_for({3, 4});
                     return ScalarFn([=](Tape<double>& t) { return weighted(t, ops::add(t, in[0], in[1]), w); });
                   }});
  prims.push_back({"mul", [&](auto& in) {
                     in = {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)};
                     auto w = w_for({3, 4});
                     return ScalarFn([=](Tape<double>& t) { return weighted(t, ops::mul(t, in[0], in[1]), w); });
                   }});
  prims.push_back({"scale_relu", [&](auto& in) {
                     in = {random_tensor({4, 5}, rng)};
                     auto w = w_for({4, 5});
                     return ScalarFn([=](Tape<double>& t) { return weighted(t, ops::relu(t, ops::scale(t, in[0], 1.7)), w); });
                   }});
  prims.push_back({"softmax", [&](auto& in) {
                     in = {random_tensor({3, 5}, rng, true, 3.0)};
                     auto w = w_for({3, 5});
                     return ScalarFn([=](Tape<double>& t) { return weighted(t, ops::softmax(t, in[0], 1), w); });
                   }});
  prims.push_back({"masked_softmax", [&](auto& in) {
                     in = {random_tensor({2, 4}, rng, true, 3.0)};
                     auto w = w_for({2, 4});
                     return ScalarFn([=](Tape<double>& t) {
                       static const std::vector<std::uint8_t> keep{1, 0, 1, 1, 1, 1, 0, 0};
                       return weighted(t, ops::masked_softmax(t, in[0], keep), w);
                     });
                   }});
  prims.push_back({"layer_norm", [&](auto& in) {
                     in = {random_tensor({3, 6}, rng, true, 2.0), random_tensor({6}, rng), random_tensor({6}, rng)};
                     auto w = w_for({3, 6});
                     return ScalarFn(
                         [=](Tape<double>& t) { return weighted(t, ops::layer_norm(t, in[0], 1e-5, in[1], in[2]), w); });
                   }});
  prims.push_back({"embedding", [&](auto& in) {
                     in = {random_tensor({5, 3}, rng)};
                     auto w = w_for({2, 2, 3});
                     return ScalarFn([=](Tape<double>& t) {
                       static const std::vector<int> ids{4, 0, 4, 2};
                       return weighted(t, ops::embedding(t, in[0], ids, {2, 2}), w);
                     });
                   }});
  prims.push_back({"heads", [&](auto& in) {
                     in = {random_tensor({2, 3, 4}, rng)};
                     auto w = w_for({2, 3, 4});
                     return ScalarFn([=](Tape<double>& t) {
                       auto s = ops::scale(t, ops::split_heads(t, in[0], 2), 2.0);
                       return weighted(t, ops::merge_heads(t, ops::mul(t, s, s), 2), w);
                     });
                   }});
  prims.push_back({"mean_pool_time", [&](auto& in) {
                     in = {random_tensor({2, 5, 3}, rng)};
                     auto w = w_for({2, 3, 3});
                     return ScalarFn([=](Tape<double>& t) {
                       static const std::vector<std::size_t> lens{5, 3};
                       return weighted(t, ops::mean_pool_time(t, in[0], lens, 2), w);
                     });
                   }});
  prims.push_back({"label_smoothed_ce", [&](auto& in) {
                     in = {random_tensor({4, 6}, rng, true, 2.0)};
                     return ScalarFn([=](Tape<double>& t) {
                       static const std::vector<int> targets{3, 0, 5, 1};
                       return ops::label_smoothed_ce(t, in[0], targets, 0.1, 0);
                     });
                   }});
  for (auto& [name, build] : prims) {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor<double>> inputs;
      const auto f = build(inputs);
      for (auto& x : inputs) {
        const auto rep = grad_check(f, x, 1e-6, 1e-4);
        worst_primitive = std::max(worst_primitive, rep.max_rel_error);
        if (!rep.passed) v.require(false, name);
      }
    }
  }

  double worst_e2e = 0.0;
  for (auto task : {TaskKind::MT, TaskKind::STAnalog}) {
    const auto data = make_task_dataset(task, tiny_language(), tiny_frames(), {3, 1, 1}).train;
    const auto batch = collate(data, {0, 1, 2});
    for (auto variant : kVariants) {
      auto m = tiny_model(task, variant, 2, 2, 7);
      ScalarFn f = [&](Tape<double>& t) {
        RunContext<double> ctx;
        const auto enc = encoder_forward(t, m, batch.source, ctx);
        const auto logits = decoder_forward(t, m, enc, batch.target.input, batch.target.batch, batch.target.max_length, ctx);
        return ops::label_smoothed_ce(t, logits, batch.target.output, 0.1, kPadId);
      };
      const auto rep = grad_check_sampled(f, m.params.tensors(), 40, 3, 1e-6, 1e-3);
      worst_e2e = std::max(worst_e2e, rep.max_rel_error);
      v.require(rep.passed, "end-to-end " + to_string(task) + " " + to_string(variant));
    }
  }
  v.detail << "worst primitive rel err " << worst_primitive << " (< 1e-4), worst end-to-end " << worst_e2e
           << " (< 1e-3), " << prims.size() << " primitives, 4 variants x 2 input modes";
  return v;
}

Verdict criterion_residual() {
  Verdict v;
  std::mt19937_64 rng(2);
  Tape<double> tape(false);
  double worst_share = 0.0;
  bool noweights_equal = true, standard_sum = true;
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_tensor({4, 16}, rng, false, 3.0);
    const auto r = random_tensor({4, 16}, rng, false, 3.0);
    const double lambda = 0.05 + 0.9 * double(trial % 19) / 18.0;
    Tensor<double> ta, tr;
    combine_cross_residual(tape, a, r, ResidualVariant::WeRC, lambda, 1e-5, &ta, &tr);
    for (std::size_t row = 0; row < 4; ++row) {
      double na = 0.0, nr = 0.0;
      for (std::size_t c = 0; c < 16; ++c) {
        na += ta.data()[row * 16 + c] * ta.data()[row * 16 + c];
        nr += tr.data()[row * 16 + c] * tr.data()[row * 16 + c];
      }
      worst_share = std::max(worst_share, std::abs(std::sqrt(na) / (std::sqrt(na) + std::sqrt(nr)) - lambda));
    }
    const auto nw = combine_cross_residual(tape, a, r, ResidualVariant::WeRCNoWeights, lambda, 1e-5);
    const auto half = combine_cross_residual(tape, a, r, ResidualVariant::WeRC, 0.5, 1e-5);
    noweights_equal = noweights_equal && std::equal(nw.data().begin(), nw.data().end(), half.data().begin());
    const auto st = combine_cross_residual(tape, a, r, ResidualVariant::Standard, lambda, 1e-5);
    for (std::size_t i = 0; i < st.size(); ++i) standard_sum = standard_sum && st.data()[i] == a.data()[i] + r.data()[i];
  }
  const auto ex = combine_cross_residual(tape, Tensor<double>({2}, {1, -1}), Tensor<double>({2}, {0, 2}),
                                         ResidualVariant::WeRC, 0.65, 0.0);
  const auto nn = combine_cross_residual(tape, Tensor<double>({2}, {2, -2}), Tensor<double>({2}, {-2, 2}),
                                         ResidualVariant::WeRCNoNorm, 0.65, 1e-5);
  v.require(worst_share < 1e-3, "norm share");
  v.require(noweights_equal, "no-weights equals lambda 0.5");
  v.require(standard_sum, "standard is a plain sum");
  v.require(std::abs(ex.data()[0] - 0.3) < 1e-12 && std::abs(ex.data()[1] + 0.3) < 1e-12, "WeRC example");
  v.require(std::abs(nn.data()[0] - 0.6) < 1e-12 && std::abs(nn.data()[1] + 0.6) < 1e-12, "no-norm example");
  v.detail << "max |norm share - lambda| " << worst_share << " (< 1e-3), no-weights bitwise equal to lambda 0.5, "
           << "standard bitwise a + r";
  return v;
}

Verdict criterion_contribution() {
  Verdict v;
  double worst_rec = 0.0, worst_row = 0.0, worst_share = 0.0, worst_closed = 0.0;
  std::size_t blocks = 0, tokens = 0;
  for (auto task : {TaskKind::MT, TaskKind::STAnalog}) {
    const auto data = make_task_dataset(task, tiny_language(), tiny_frames(), {10, 1, 1}).train;
    for (auto variant : kVariants) {
      for (std::size_t layers : {1u, 2u}) {
        const auto m = tiny_model(task, variant, layers, layers, 11 + layers);
        for (std::size_t i = 0; i < data.examples.size(); ++i) {
          const auto batch = collate(data, {i});
          Tape<double> tape(false);
          ForwardTrace<double> trace;
          RunContext<double> ctx{false, nullptr, &trace};
          const auto enc = encoder_forward(tape, m, batch.source, ctx);
          decoder_forward(tape, m, enc, batch.target.input, 1, batch.target.max_length, ctx);
          std::vector<double> key_mass;
          for (const auto& block : trace.blocks) {
            const auto dec = decompose_attention_block(m, block, 1.0);
            worst_rec = std::max(worst_rec, dec.reconstruction_error());
            const auto lc = layer_contribution_matrix(dec);
            for (std::size_t r = 0; r < lc.matrix.rows; ++r) {
              worst_row = std::max(worst_row, std::abs(lc.matrix.row_sum(r) - 1.0));
              for (std::size_t c = 0; c < lc.matrix.cols; ++c) worst_row = std::max(worst_row, -lc.matrix(r, c));
              if (block.kind == BlockKind::DecoderCross && layers == 1) {
                double mass = 0.0;
                for (std::size_t c = 0; c < block.keys; ++c) mass += lc.matrix(r, c);
                key_mass.push_back(mass);
              }
            }
            ++blocks;
          }
          const auto s = sentence_contribution(m, data, i);
          for (std::size_t t = 0; t < s.source_share.size(); ++t) {
            worst_share = std::max(worst_share, std::abs(s.source_share[t] + s.target_share[t] - 1.0));
            if (layers == 1) worst_closed = std::max(worst_closed, std::abs(s.source_share[t] - key_mass[t]));
            ++tokens;
          }
        }
      }
    }
  }
  v.require(worst_rec < 1e-6, "reconstruction");
  v.require(worst_row < 1e-9, "row stochastic");
  v.require(worst_share < 1e-9, "shares sum to one");
  v.require(worst_closed < 1e-9, "single-layer closed form");
  v.detail << "reconstruction " << worst_rec << " (< 1e-6), row deviation " << worst_row << " (< 1e-9), share sum "
           << worst_share << " (< 1e-9), single-layer oracle " << worst_closed << "; " << blocks << " blocks, "
           << tokens << " tokens";
  return v;
}

// ---------------------------------------------------------------------------
// Suite-based criteria

const RunReport& find_run(const SeedReport& s, const std::string& name) {
  for (const auto& r : s.runs)
    if (r.run == name) return r;
  throw std::runtime_error("seed " + std::to_string(s.seed) + " lacks run " + name);
}

double seed_mean(const std::vector<SeedReport>& seeds, const std::string& run) {
  double sum = 0.0;
  for (const auto& s : seeds) sum += find_run(s, run).final_bleu;
  return sum / double(seeds.size());
}

std::size_t majority(std::size_t n) { return n / 2 + 1; }

Verdict criterion_dynamics(const std::vector<SeedReport>& seeds) {
  Verdict v;
  std::size_t faster = 0;
  double pre_plateau = 0.0, scr_plateau = 0.0;
  for (const auto& s : seeds) {
    const auto& pre = find_run(s, "baseline_pretrained").curve;
    const auto& scr = find_run(s, "baseline_scratch").curve;
    const auto tp = steps_to_fraction(pre, 0.9);
    const auto ts = steps_to_fraction(scr, 0.9);
    const bool ok = tp && (!ts || *tp < *ts);
    faster += ok;
    pre_plateau += curve_plateau(pre) / double(seeds.size());
    scr_plateau += curve_plateau(scr) / double(seeds.size());
    v.detail << "seed " << s.seed << ": 90% at " << (tp ? std::to_string(*tp) : "never") << " vs "
             << (ts ? std::to_string(*ts) : "never") << " (plateaus " << curve_plateau(pre) << " vs "
             << curve_plateau(scr) << "); ";
  }
  v.require(faster >= majority(seeds.size()), "pretrained reaches 90% earlier in a majority of seeds");
  v.require(scr_plateau < pre_plateau, "scratch plateau below pretrained");
  v.detail << "pretrained faster in " << faster << "/" << seeds.size() << ", mean plateaus " << pre_plateau
           << " (pretrained) vs " << scr_plateau << " (scratch)";
  return v;
}

Verdict criterion_werc(const std::vector<SeedReport>& seeds) {
  Verdict v;
  std::size_t wins = 0;
  for (const auto& s : seeds) wins += find_run(s, "werc_scratch").final_bleu >= find_run(s, "baseline_scratch").final_bleu;
  const double pre = seed_mean(seeds, "baseline_pretrained"), scr = seed_mean(seeds, "baseline_scratch");
  const double werc = seed_mean(seeds, "werc_scratch"), nn = seed_mean(seeds, "werc_no_norm");
  const double nw = seed_mean(seeds, "werc_no_weights");
  const double lo = std::min(scr, werc), hi = std::max(scr, werc);
  v.require(wins >= majority(seeds.size()), "werc_scratch >= baseline_scratch in a majority of seeds");
  v.require(std::abs(werc - pre) < std::abs(scr - pre), "werc closes the gap to pretrained");
  v.require(nn >= lo && nn <= hi, "no-norm ablation between scratch and werc");
  v.require(nw >= lo && nw <= hi, "no-weights ablation between scratch and werc");
  v.detail << "werc >= scratch in " << wins << "/" << seeds.size() << " seeds; seed-mean BLEU pretrained " << pre
           << ", scratch " << scr << ", werc " << werc << ", no_norm " << nn << ", no_weights " << nw;
  return v;
}

Verdict criterion_no_regression(const std::vector<SeedReport>& seeds) {
  Verdict v;
  const double mt = seed_mean(seeds, "mt_reference"), mt_w = seed_mean(seeds, "werc_on_mt");
  const double pre = seed_mean(seeds, "baseline_pretrained"), pre_w = seed_mean(seeds, "werc_on_pretrained");
  v.require(std::abs(mt_w - mt) < 1.0, "WeRC on MT within 1 BLEU");
  v.require(std::abs(pre_w - pre) < 1.0, "WeRC on pretrained within 1 BLEU");
  v.detail << "MT " << mt << " -> " << mt_w << " (delta " << mt_w - mt << "), pretrained " << pre << " -> " << pre_w
           << " (delta " << pre_w - pre << ")";
  return v;
}

Verdict criterion_mt_stages(const std::vector<SeedReport>& seeds) {
  Verdict v;
  std::size_t ok = 0;
  for (const auto& s : seeds) {
    const auto& c = find_run(s, "mt_reference").curve;
    const double init = c.front().src_contrib_mean, dip = early_minimum(c), plateau = curve_plateau(c);
    const bool seed_ok = dip < init && dip < plateau;
    ok += seed_ok;
    v.detail << "seed " << s.seed << ": initial " << init << ", early min " << dip << ", plateau " << plateau << "; ";
  }
  v.require(ok >= majority(seeds.size()), "dip then rise in a majority of seeds");
  v.detail << "dip-then-rise in " << ok << "/" << seeds.size() << " seeds";
  return v;
}

Verdict criterion_reproducible(const fs::path& work) {
  Verdict v;
  const auto a = work / "repro_a", b = work / "repro_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const auto config = suite_preset("quick");
  run_suite(config, a);
  run_suite(config, b);
  std::size_t compared = 0, differing = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".csv") continue;
    const auto other = b / fs::relative(entry.path(), a);
    auto slurp = [](const fs::path& p) {
      std::ifstream is(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(is), {});
    };
    ++compared;
    if (!fs::exists(other) || slurp(entry.path()) != slurp(other)) {
      ++differing;
      v.detail << "differs: " << fs::relative(entry.path(), a).string() << "; ";
    }
  }
  v.require(compared > 0, "CSV files produced");
  v.require(differing == 0, "bitwise identical CSVs");
  v.detail << compared << " CSV files compared, " << differing << " differ";
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"srclab acceptance checks"};
  std::string work_dir = (fs::temp_directory_path() / "srclab_acceptance").string();
  std::string reuse;
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "Scratch directory for suite outputs")->capture_default_str();
  app.add_option("--reuse-suite", reuse, "Analyze a finished default suite instead of training one");
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  const std::map<int, std::string> titles{{1, "gradient checks"},     {2, "weighted residual combiner"},
                                          {3, "contribution soundness"}, {4, "contribution dynamics"},
                                          {5, "WeRC effect on ST"},    {6, "no regression on MT and pretrained ST"},
                                          {7, "MT decrease then increase"}, {8, "reproducible suite CSVs"}};
  bool all_pass = true;
  auto report = [&](int id, const std::function<Verdict()>& fn) {
    if (!wanted(id)) return;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << "error: " << e.what();
    }
    all_pass = all_pass && v.pass;
    std::cout << "criterion " << id << " (" << titles.at(id) << "): " << (v.pass ? "PASS" : "FAIL") << " - "
              << v.detail.str() << std::endl;
  };

  report(1, criterion_gradients);
  report(2, criterion_residual);
  report(3, criterion_contribution);

  if (wanted(4) || wanted(5) || wanted(6) || wanted(7)) {
    std::vector<SeedReport> seeds;
    std::string suite_error;
    try {
      if (!reuse.empty()) {
        std::vector<fs::path> dirs;
        for (const auto& e : fs::directory_iterator(reuse))
          if (e.is_directory() && e.path().filename().string().starts_with("seed_")) dirs.push_back(e.path());
        std::sort(dirs.begin(), dirs.end());
        for (const auto& d : dirs) seeds.push_back(load_seed_report(d));
        if (seeds.empty()) throw std::runtime_error("no seed_* directories under " + reuse);
      } else {
        const auto dir = fs::path(work_dir) / "default_suite";
        fs::remove_all(dir);
        std::cout << "training the default suite into " << dir.string() << std::endl;
        seeds = run_suite(suite_preset("default"), dir).seeds;
      }
    } catch (const std::exception& e) {
      suite_error = e.what();
    }
    auto suite_check = [&](const std::function<Verdict(const std::vector<SeedReport>&)>& fn) {
      return [&, fn] {
        if (!suite_error.empty()) throw std::runtime_error("suite failed: " + suite_error);
        return fn(seeds);
      };
    };
    report(4, suite_check(criterion_dynamics));
    report(5, suite_check(criterion_werc));
    report(6, suite_check(criterion_no_regression));
    report(7, suite_check(criterion_mt_stages));
  }
  report(8, [&] { return criterion_reproducible(work_dir); });
  return all_pass ? 0 : 1;
}
