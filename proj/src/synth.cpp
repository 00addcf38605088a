#include "srclab/synth.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "srclab/binary_io.hpp"

namespace srclab {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ stream) ^ index);
}

// ---------------------------------------------------------------------------
// Language

SynthLanguage::SynthLanguage(SynthLanguageSpec spec) : spec_(std::move(spec)) {
  const auto v = spec_.vocab_src;
  if (v < 2) throw ContractViolation("synthetic vocabulary needs at least 2 tokens");
  if (spec_.vocab_tgt != v) throw ContractViolation("token mapping must be a bijection: vocab_src != vocab_tgt");
  if (spec_.min_len < 1 || spec_.max_len < spec_.min_len) throw ContractViolation("invalid sentence length range");
  if (spec_.successors > v) throw ContractViolation("successors exceeds vocabulary size");

  if (spec_.mapping.empty()) {
    mapping_.resize(v);
    std::iota(mapping_.begin(), mapping_.end(), 0);
    std::mt19937_64 rng(derive_seed(spec_.seed, 1));
    std::shuffle(mapping_.begin(), mapping_.end(), rng);
  } else {
    mapping_ = spec_.mapping;
  }
  if (mapping_.size() != v) throw ContractViolation("mapping must cover the whole vocabulary");
  inverse_.assign(v, -1);
  for (std::size_t i = 0; i < v; ++i) {
    const auto t = mapping_[i];
    if (t < 0 || static_cast<std::size_t>(t) >= v || inverse_[static_cast<std::size_t>(t)] != -1)
      throw ContractViolation("mapping is not a permutation");
    inverse_[static_cast<std::size_t>(t)] = static_cast<int>(i);
  }

  if (spec_.successors > 0) {
    std::mt19937_64 rng(derive_seed(spec_.seed, 2));
    std::vector<int> all(v);
    std::iota(all.begin(), all.end(), 0);
    next_.resize(v);
    next_weights_.resize(v);
    for (std::size_t a = 0; a < v; ++a) {
      std::shuffle(all.begin(), all.end(), rng);
      next_[a].assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec_.successors));
      for (std::size_t r = 0; r < spec_.successors; ++r) next_weights_[a].push_back(1.0 / double(r + 1));
    }
  }
}

std::vector<int> SynthLanguage::translate(const std::vector<int>& src) const {
  std::vector<int> out;
  out.reserve(src.size());
  for (auto s : src) out.push_back(map(s));
  for (std::size_t i = 0; i + 1 < src.size(); i += 2)
    if (std::min(src[i], src[i + 1]) % 2 == 0) std::swap(out[i], out[i + 1]);
  return out;
}

std::vector<int> SynthLanguage::inverse_translate(const std::vector<int>& tgt) const {
  std::vector<int> src;
  src.reserve(tgt.size());
  for (auto t : tgt) src.push_back(unmap(t));
  for (std::size_t i = 0; i + 1 < src.size(); i += 2)
    if (std::min(src[i], src[i + 1]) % 2 == 0) std::swap(src[i], src[i + 1]);
  return src;
}

std::vector<int> SynthLanguage::sample_sentence(std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> length(spec_.min_len, spec_.max_len);
  std::uniform_int_distribution<int> uniform(0, static_cast<int>(spec_.vocab_src) - 1);
  const auto n = length(rng);
  std::vector<int> s;
  s.reserve(n);
  s.push_back(uniform(rng));
  while (s.size() < n) {
    if (spec_.successors == 0) {
      s.push_back(uniform(rng));
      continue;
    }
    const auto prev = static_cast<std::size_t>(s.back());
    std::discrete_distribution<std::size_t> pick(next_weights_[prev].begin(), next_weights_[prev].end());
    s.push_back(next_[prev][pick(rng)]);
  }
  return s;
}

std::vector<ParallelPair> gen_parallel_corpus(const SynthLanguageSpec& spec, std::size_t n, std::uint64_t stream) {
  SynthLanguage lang(spec);
  std::vector<ParallelPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(spec.seed, 1000 + stream, i));
    auto src = lang.sample_sentence(rng);
    auto tgt = lang.translate(src);
    out.push_back({std::move(src), std::move(tgt)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frames

FrameRenderer::FrameRenderer(FrameRenderSpec spec, std::size_t vocab) : spec_(spec), vocab_(vocab) {
  if (spec_.k_min < 1 || spec_.k_max < spec_.k_min) throw ContractViolation("frame duration range must have 1 <= k_min <= k_max");
  if (spec_.feature_dim < 1) throw ContractViolation("feature_dim must be >= 1");
  if (!(spec_.noise_std >= 0.0)) throw ContractViolation("noise_std must be >= 0");
  std::mt19937_64 rng(derive_seed(spec_.seed, 3));
  std::normal_distribution<double> gauss(0.0, 1.0);
  prototypes_.resize(vocab_ * spec_.feature_dim);
  for (auto& v : prototypes_) v = static_cast<float>(gauss(rng));
}

std::span<const float> FrameRenderer::prototype(int token) const {
  if (token < 0 || static_cast<std::size_t>(token) >= vocab_) throw ContractViolation("token outside renderer vocabulary");
  return {prototypes_.data() + static_cast<std::size_t>(token) * spec_.feature_dim, spec_.feature_dim};
}

FrameMatrix FrameRenderer::render(const std::vector<int>& tokens, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> duration(spec_.k_min, spec_.k_max);
  std::normal_distribution<double> noise(0.0, spec_.noise_std > 0 ? spec_.noise_std : 1.0);
  FrameMatrix m;
  m.feature_dim = spec_.feature_dim;
  for (auto tok : tokens) {
    const auto proto = prototype(tok);
    const auto k = duration(rng);
    for (std::size_t f = 0; f < k; ++f) {
      for (auto p : proto)
        m.values.push_back(spec_.noise_std > 0 ? static_cast<float>(p + noise(rng)) : p);
      ++m.frame_count;
    }
  }
  return m;
}

FrameMatrix render_frames(const std::vector<int>& tokens, const FrameRenderSpec& spec, std::size_t vocab,
                          std::uint64_t seed) {
  return FrameRenderer(spec, vocab).render(tokens, seed);
}

// ---------------------------------------------------------------------------
// Datasets

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::MT: return "mt";
    case TaskKind::ASRAnalog: return "asr_analog";
    case TaskKind::STAnalog: return "st_analog";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& s) {
  for (auto k : {TaskKind::MT, TaskKind::ASRAnalog, TaskKind::STAnalog})
    if (to_string(k) == s) return k;
  throw ContractViolation("unknown task kind '" + s + "'");
}

std::uint64_t hash_tokens(const std::vector<int>& tokens) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto t : tokens) {
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) + 0x9E3779B97F4A7C15ull;
    h *= 0x100000001b3ull;
    h = derive_seed(h, 0);
  }
  return h ^ tokens.size();
}

namespace {

std::vector<int> to_model_ids(const std::vector<int>& content) {
  std::vector<int> out;
  out.reserve(content.size() + 1);
  for (auto c : content) out.push_back(c + kNumSpecialTokens);
  return out;
}

Dataset build_split(TaskKind kind, const SynthLanguage& lang, const FrameRenderer& renderer, std::size_t n,
                    std::uint64_t split_seed, std::unordered_set<std::uint64_t>& taken_by_earlier,
                    std::vector<std::uint64_t>& produced) {
  Dataset data;
  data.kind = kind;
  data.feature_dim = uses_frames(kind) ? renderer.spec().feature_dim : 0;
  data.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> src;
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt > 10000) throw ContractViolation("cannot draw enough distinct sentences; enlarge the language");
      std::mt19937_64 rng(derive_seed(lang.spec().seed ^ split_seed, i, attempt));
      src = lang.sample_sentence(rng);
      if (!taken_by_earlier.contains(hash_tokens(src))) break;
    }
    produced.push_back(hash_tokens(src));

    Example ex;
    ex.id = i;
    ex.source_tokens = to_model_ids(src);
    if (uses_frames(kind)) ex.frames = renderer.render(src, derive_seed(renderer.spec().seed, split_seed, i));
    ex.target = kind == TaskKind::ASRAnalog ? ex.source_tokens : to_model_ids(lang.translate(src));
    ex.target.push_back(kEosId);
    data.examples.push_back(std::move(ex));
  }
  return data;
}

}  // namespace

DatasetSplits make_task_dataset(TaskKind kind, const SynthLanguageSpec& lang_spec, const FrameRenderSpec& frames,
                                SplitSizes sizes, SplitSeeds seeds) {
  if (seeds.train == seeds.valid || seeds.train == seeds.test || seeds.valid == seeds.test)
    throw ContractViolation("split seeds must be pairwise distinct");
  if (sizes.train == 0) throw ContractViolation("training split must be non-empty");
  SynthLanguage lang(lang_spec);
  FrameRenderer renderer(frames, lang_spec.vocab_src);

  std::unordered_set<std::uint64_t> taken;
  DatasetSplits out;
  std::vector<std::uint64_t> produced;
  auto commit = [&] {
    taken.insert(produced.begin(), produced.end());
    produced.clear();
  };
  out.train = build_split(kind, lang, renderer, sizes.train, seeds.train, taken, produced);
  commit();
  out.valid = build_split(kind, lang, renderer, sizes.valid, seeds.valid, taken, produced);
  commit();
  out.test = build_split(kind, lang, renderer, sizes.test, seeds.test, taken, produced);
  return out;
}

void configure_for_task(ModelConfig& config, TaskKind kind, const SynthLanguageSpec& lang,
                        const FrameRenderSpec& frames) {
  config.vocab_src = lang.vocab_src + kNumSpecialTokens;
  config.vocab_tgt = lang.vocab_tgt + kNumSpecialTokens;
  config.input_mode = uses_frames(kind) ? InputMode::Frames : InputMode::Tokens;
  config.feature_dim = frames.feature_dim;
}

// ---------------------------------------------------------------------------
// Batching

std::size_t Batch::target_tokens() const {
  std::size_t n = 0;
  for (auto len : target.lengths) n += len;
  return n;
}

Batch collate(const Dataset& data, std::vector<std::size_t> indices) {
  if (indices.empty()) throw ContractViolation("cannot collate an empty batch");
  Batch b;
  const auto n = indices.size();
  b.source.batch = n;
  b.target.batch = n;
  for (auto i : indices) {
    const auto& ex = data.examples.at(i);
    b.source.lengths.push_back(ex.source_length());
    b.target.lengths.push_back(ex.target.size());
  }
  b.source.max_length = *std::max_element(b.source.lengths.begin(), b.source.lengths.end());
  b.target.max_length = *std::max_element(b.target.lengths.begin(), b.target.lengths.end());
  const auto sl = b.source.max_length;
  const auto tl = b.target.max_length;

  if (uses_frames(data.kind)) {
    const auto f = data.feature_dim;
    b.source.frames.assign(n * sl * f, 0.0f);
    for (std::size_t r = 0; r < n; ++r) {
      const auto& fr = data.examples[indices[r]].frames;
      std::copy(fr.values.begin(), fr.values.end(), b.source.frames.begin() + static_cast<std::ptrdiff_t>(r * sl * f));
    }
  } else {
    b.source.tokens.assign(n * sl, kPadId);
    for (std::size_t r = 0; r < n; ++r) {
      const auto& st = data.examples[indices[r]].source_tokens;
      std::copy(st.begin(), st.end(), b.source.tokens.begin() + static_cast<std::ptrdiff_t>(r * sl));
    }
  }

  b.target.input.assign(n * tl, kPadId);
  b.target.output.assign(n * tl, kPadId);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& tg = data.examples[indices[r]].target;
    for (std::size_t t = 0; t < tg.size(); ++t) {
      b.target.output[r * tl + t] = tg[t];
      b.target.input[r * tl + t] = t == 0 ? kBosId : tg[t - 1];
    }
  }
  b.indices = std::move(indices);
  return b;
}

std::vector<Batch> batch_epoch(const Dataset& data, std::size_t max_tokens, std::uint64_t seed) {
  if (data.examples.empty()) throw ContractViolation("cannot batch an empty dataset");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return data.examples[a].target.size() < data.examples[b].target.size();
  });

  std::vector<Batch> batches;
  std::vector<std::size_t> current;
  std::size_t longest = 0;
  for (auto idx : order) {
    const auto len = data.examples[idx].target.size();
    if (len > max_tokens)
      throw ContractViolation("example " + std::to_string(idx) + " has " + std::to_string(len) +
                              " target tokens, above the batch cap " + std::to_string(max_tokens));
    const auto grown = std::max(longest, len);
    if (!current.empty() && (current.size() + 1) * grown > max_tokens) {
      batches.push_back(collate(data, std::move(current)));
      current.clear();
      longest = 0;
    }
    current.push_back(idx);
    longest = std::max(longest, len);
  }
  if (!current.empty()) batches.push_back(collate(data, std::move(current)));
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

BatchIterator::BatchIterator(const Dataset& data, std::size_t max_tokens, std::uint64_t seed)
    : data_(&data), max_tokens_(max_tokens), seed_(seed) {
  batches_ = batch_epoch(*data_, max_tokens_, derive_seed(seed_, 0));
}

const Batch& BatchIterator::next() {
  if (cursor_ == batches_.size()) {
    ++epoch_;
    batches_ = batch_epoch(*data_, max_tokens_, derive_seed(seed_, epoch_));
    cursor_ = 0;
  }
  return batches_[cursor_++];
}

// ---------------------------------------------------------------------------
// Files

namespace {

std::string join_ids(const std::vector<int>& ids) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? " " : "") << ids[i];
  return os.str();
}

std::vector<int> split_ids(const std::string& s) {
  std::istringstream is(s);
  std::vector<int> ids;
  int v;
  while (is >> v) ids.push_back(v);
  return ids;
}

std::string field(const std::string& line, const std::string& key) {
  const auto tag = key + "=";
  std::size_t pos = 0;
  while (pos < line.size()) {
    auto end = line.find('\t', pos);
    if (end == std::string::npos) end = line.size();
    if (line.compare(pos, tag.size(), tag) == 0) return line.substr(pos + tag.size(), end - pos - tag.size());
    pos = end + 1;
  }
  throw std::runtime_error("dataset record lacks field '" + key + "': " + line);
}

}  // namespace

void save_dataset(const Dataset& data, const std::filesystem::path& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  std::ofstream txt(dir / (name + ".txt"));
  if (!txt) throw std::runtime_error("cannot write " + (dir / (name + ".txt")).string());
  const bool frames = uses_frames(data.kind);
  const std::string blob_name = name + ".frames.bin";
  std::ofstream blob;
  if (frames) {
    blob.open(dir / blob_name, std::ios::binary);
    if (!blob) throw std::runtime_error("cannot write " + (dir / blob_name).string());
  }
  txt << "#srclab-dataset v1\tkind=" << to_string(data.kind) << "\tfeature_dim=" << data.feature_dim
      << "\tcount=" << data.examples.size() << "\n";
  for (const auto& ex : data.examples) {
    txt << "id=" << ex.id << "\tsrc=" << join_ids(ex.source_tokens) << "\ttgt=" << join_ids(ex.target);
    if (frames) {
      txt << "\tframes=" << blob_name << "@" << static_cast<std::uint64_t>(blob.tellp());
      io::write_le<std::uint32_t>(blob, static_cast<std::uint32_t>(ex.frames.frame_count));
      io::write_le<std::uint32_t>(blob, static_cast<std::uint32_t>(ex.frames.feature_dim));
      for (auto v : ex.frames.values) io::write_le<float>(blob, v);
    }
    txt << "\n";
  }
}

Dataset load_dataset(const std::filesystem::path& dir, const std::string& name) {
  const auto path = dir / (name + ".txt");
  std::ifstream txt(path);
  if (!txt) throw std::runtime_error("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(txt, line) || !line.starts_with("#srclab-dataset v1"))
    throw std::runtime_error(path.string() + " is not a srclab dataset");
  Dataset data;
  data.kind = parse_task_kind(field(line, "kind"));
  data.feature_dim = std::stoul(field(line, "feature_dim"));
  const auto count = std::stoul(field(line, "count"));

  std::ifstream blob;
  while (std::getline(txt, line)) {
    if (line.empty()) continue;
    Example ex;
    ex.id = std::stoul(field(line, "id"));
    ex.source_tokens = split_ids(field(line, "src"));
    ex.target = split_ids(field(line, "tgt"));
    if (uses_frames(data.kind)) {
      const auto ref = field(line, "frames");
      const auto at = ref.find('@');
      if (at == std::string::npos) throw std::runtime_error("malformed frame reference " + ref);
      if (!blob.is_open()) {
        blob.open(dir / ref.substr(0, at), std::ios::binary);
        if (!blob) throw std::runtime_error("cannot open frame blob " + (dir / ref.substr(0, at)).string());
      }
      blob.seekg(static_cast<std::streamoff>(std::stoull(ref.substr(at + 1))));
      ex.frames.frame_count = io::read_le<std::uint32_t>(blob);
      ex.frames.feature_dim = io::read_le<std::uint32_t>(blob);
      if (ex.frames.feature_dim != data.feature_dim) throw std::runtime_error("frame blob feature_dim mismatch");
      ex.frames.values.resize(ex.frames.frame_count * ex.frames.feature_dim);
      for (auto& v : ex.frames.values) v = io::read_le<float>(blob);
    }
    data.examples.push_back(std::move(ex));
  }
  if (data.examples.size() != count)
    throw std::runtime_error(path.string() + ": header promises " + std::to_string(count) + " records, found " +
                             std::to_string(data.examples.size()));
  return data;
}

}  // namespace srclab
