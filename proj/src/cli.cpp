#include "knnqe/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "knnqe/datastore.hpp"
#include "knnqe/error.hpp"
#include "knnqe/interchange.hpp"
#include "knnqe/meta_eval.hpp"
#include "knnqe/qe_metrics.hpp"
#include "knnqe/ref_metrics.hpp"
#include "knnqe/retrieval.hpp"
#include "knnqe/token_eval.hpp"
#include "mapped_file.hpp"
#include "svg.hpp"

namespace knnqe {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using interchange::ScoreFragment;
using interchange::SegmentKey;

constexpr int kScoreTableVersion = 1;
constexpr int kIvfFormatVersion = 1;

// ---- Shared helpers ---------------------------------------------------------

unsigned resolve_threads(unsigned requested) {
  if (requested != 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string abs_input(const std::string& path) {
  return fs::absolute(interchange::resolve_input_path(path)).lexically_normal().string();
}

std::string abs_output(const std::string& path) { return fs::absolute(path).lexically_normal().string(); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) { detail::write_file(path, text); }

void write_run_json(const fs::path& dir, std::string_view command, json config) {
  json run = {{"tool", "knnqe"},
              {"command", command},
              {"format_versions",
               {{"tensor", interchange::kTensorVersion},
                {"datastore", kDatastoreFormatVersion},
                {"ivf", kIvfFormatVersion},
                {"score_table", kScoreTableVersion}}},
              {"config", std::move(config)}};
  write_text(dir / "run.json", run.dump(2) + "\n");
}

std::vector<std::string> read_lines(const std::string& path) {
  const auto resolved = interchange::resolve_input_path(path);
  std::ifstream in(resolved);
  if (!in) throw IoError("cannot open '" + resolved.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    out.emplace_back(text.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Segment keys for line-aligned text files: a keys TSV with system, domain
// and seg_id columns, or defaults plus the 1-based line number.
std::vector<SegmentKey> line_keys(const std::string& keys_path, const std::string& system,
                                  const std::string& domain, std::size_t lines) {
  std::vector<SegmentKey> keys;
  if (keys_path.empty()) {
    for (std::size_t i = 0; i < lines; ++i) keys.push_back({system, domain, std::to_string(i + 1)});
    return keys;
  }
  const auto rows = read_lines(keys_path);
  if (rows.empty()) throw ValidationError("keys file '" + keys_path + "' has no header");
  const auto header = split(rows[0], '\t');
  auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ValidationError("keys file '" + keys_path + "' lacks a '" + name + "' column");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cs = col("system"), cd = col("domain"), ci = col("seg_id");
  std::set<SegmentKey> seen;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].empty()) continue;
    const auto fields = split(rows[r], '\t');
    if (fields.size() != header.size()) {
      throw ValidationError("keys file '" + keys_path + "' row " + std::to_string(r + 1) + ": expected " +
                            std::to_string(header.size()) + " fields");
    }
    SegmentKey key{fields[cs], fields[cd], fields[ci]};
    if (!seen.insert(key).second) {
      throw ValidationError("keys file '" + keys_path + "' row " + std::to_string(r + 1) + ": duplicate key");
    }
    keys.push_back(std::move(key));
  }
  if (keys.size() != lines) {
    throw ValidationError("keys file '" + keys_path + "' has " + std::to_string(keys.size()) + " keys for " +
                          std::to_string(lines) + " lines");
  }
  return keys;
}

// Reference lists per segment: human files first, then synthetic ones.
ReferenceSet load_references(std::span<const std::string> human, std::span<const std::string> synthetic,
                             std::span<const SegmentKey> keys) {
  std::vector<std::pair<std::vector<std::string>, RefProvenance>> files;
  for (const auto& f : human) files.emplace_back(read_lines(f), RefProvenance::kHuman);
  for (const auto& f : synthetic) files.emplace_back(read_lines(f), RefProvenance::kSynthetic);
  if (files.empty()) throw InvalidArgument("no reference files given");
  ReferenceSet set;
  for (std::size_t f = 0; f < files.size(); ++f) {
    if (files[f].first.size() != keys.size()) {
      throw ValidationError("reference file " + std::to_string(f + 1) + " has " +
                            std::to_string(files[f].first.size()) + " lines, hypotheses have " +
                            std::to_string(keys.size()));
    }
  }
  for (std::size_t i = 0; i < keys.size(); ++i) {
    std::vector<Reference> refs;
    for (std::size_t f = 0; f < files.size(); ++f) {
      if (files[f].first[i].empty()) {
        throw ValidationError("reference file " + std::to_string(f + 1) + " line " + std::to_string(i + 1) +
                              " is empty");
      }
      refs.push_back({files[f].first[i], files[f].second});
    }
    set.add(keys[i], std::move(refs));
  }
  return set;
}

std::map<std::string, Polarity> parse_polarity_overrides(std::span<const std::string> specs) {
  std::map<std::string, Polarity> out;
  for (const auto& spec : specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--polarity expects NAME=higher|lower, got '" + spec + "'");
    const auto p = parse_polarity(spec.substr(eq + 1));
    if (!p) throw InvalidArgument("--polarity: unknown polarity '" + spec.substr(eq + 1) + "'");
    out[spec.substr(0, eq)] = *p;
  }
  return out;
}

std::optional<Polarity> lookup(const std::map<std::string, Polarity>& overrides, const std::string& name) {
  auto it = overrides.find(name);
  if (it == overrides.end()) return std::nullopt;
  return it->second;
}

// Human scores default to higher_is_better unless the name says otherwise.
ScoreFragment load_human(const std::string& path, const std::map<std::string, Polarity>& overrides) {
  auto frag = interchange::read_score_table(path);
  auto p = lookup(overrides, frag.name);
  if (!p) p = known_polarity(frag.name);
  frag.polarity = p.value_or(Polarity::kHigherIsBetter);
  return frag;
}

ScoreFragment load_metric(const std::string& path, const std::map<std::string, Polarity>& overrides) {
  auto frag = interchange::read_score_table(path);
  const std::string name = frag.name;
  return ingest_external(name, std::move(frag), lookup(overrides, name));
}

std::string fmt(double v) { return interchange::format_double(v); }

// ---- build ------------------------------------------------------------------

struct BuildArgs {
  std::string manifest, vectors, embeddings, out;
  std::optional<double> fraction;
  std::uint64_t seed = 0;
  std::size_t ivf_clusters = 0;
  std::size_t ivf_train_points = 0;
  std::size_t ivf_iterations = 25;
  bool allow_test_side = false;
  unsigned threads = 0;
};

int cmd_build(const BuildArgs& a, std::ostream& out) {
  const fs::path dir = a.out;
  json config = {{"manifest", abs_input(a.manifest)},
                 {"vectors", abs_input(a.vectors)},
                 {"embeddings", a.embeddings.empty() ? json(nullptr) : json(abs_input(a.embeddings))},
                 {"out", abs_output(a.out)},
                 {"fraction", a.fraction.value_or(1.0)},
                 {"seed", a.seed},
                 {"ivf_clusters", a.ivf_clusters},
                 {"ivf_train_points", a.ivf_train_points},
                 {"ivf_iterations", a.ivf_iterations},
                 {"allow_test_side", a.allow_test_side},
                 {"threads", resolve_threads(a.threads)}};
  if (a.fraction) sample_size(*a.fraction, 1);  // range check before any work

  const auto bundle = interchange::load_bundle(
      a.manifest, a.vectors, a.embeddings.empty() ? std::nullopt : std::optional<fs::path>(a.embeddings));
  BuildOptions options;
  options.allow_test_side = a.allow_test_side;
  options.source_name = fs::path(a.manifest).filename().string();
  auto store = Datastore::from_bundle(bundle, options);
  if (a.fraction) store = store.sample(*a.fraction, a.seed);

  ensure_dir(dir);
  store.save(dir);
  if (a.ivf_clusters > 0) {
    IvfOptions ivf_options;
    ivf_options.max_iterations = a.ivf_iterations;
    ivf_options.max_train_points = a.ivf_train_points;
    const auto ivf = build_ivf(store, a.ivf_clusters, a.seed, ivf_options);
    ivf.save(dir / "ivf.kqe");
    config["ivf_iterations_run"] = ivf.iterations_run();
  }
  write_run_json(dir, "build", std::move(config));
  out << "datastore: " << store.sentence_count() << " sentences, " << store.token_count() << " tokens, dim "
      << store.dim() << " -> " << dir.string() << "\n";
  return 0;
}

// ---- score ------------------------------------------------------------------

struct ScoreArgs {
  std::string datastore, manifest, vectors, embeddings, out;
  std::vector<std::string> metrics{"knn_token_distance"};
  std::size_t k = 0;
  std::string mode = "exact";
  std::size_t probes = 8;
  std::vector<std::size_t> sweep_k;
  std::vector<double> sweep_fraction;
  std::uint64_t seed = 0;
  std::string gold;
  std::vector<std::string> polarity;
  std::string system = "default";
  std::string domain = "default";
  unsigned threads = 0;
};

struct SweepRow {
  std::string point;
  double x = 0.0;
  std::string metric;
  std::string k;
  double fraction = 1.0;
  std::size_t segments = 0;
  double mean = 0.0;
  std::optional<double> spearman;
};

int cmd_score(const ScoreArgs& a, std::ostream& out) {
  if (!a.sweep_k.empty() && !a.sweep_fraction.empty()) {
    throw InvalidArgument("--sweep-k and --sweep-fraction cannot be combined");
  }
  const auto mode = a.mode == "ivf" ? SearchMode::kIvf : SearchMode::kExact;
  if (mode == SearchMode::kIvf && !a.sweep_fraction.empty()) {
    throw InvalidArgument("--sweep-fraction needs exact mode: the IVF index covers the full datastore only");
  }
  for (double f : a.sweep_fraction) sample_size(f, 1);

  std::vector<MetricName> base;
  bool want_ensemble = false;
  for (const auto& m : a.metrics) {
    const auto name = parse_metric(m);
    if (!name) throw InvalidArgument("unknown metric '" + m + "'");
    if (*name == MetricName::kEnsemble) {
      want_ensemble = true;
    } else if (std::find(base.begin(), base.end(), *name) == base.end()) {
      base.push_back(*name);
    }
  }
  if (want_ensemble && base.size() < 2) {
    throw InvalidArgument("ensemble needs at least two base metrics, got " + std::to_string(base.size()));
  }
  if (base.empty()) throw InvalidArgument("no metrics selected");

  const auto overrides = parse_polarity_overrides(a.polarity);
  std::optional<ScoreFragment> gold;
  if (!a.gold.empty()) gold = load_human(a.gold, overrides);

  json config = {{"datastore", abs_input(a.datastore)},
                 {"manifest", abs_input(a.manifest)},
                 {"vectors", abs_input(a.vectors)},
                 {"embeddings", a.embeddings.empty() ? json(nullptr) : json(abs_input(a.embeddings))},
                 {"out", abs_output(a.out)},
                 {"metrics", a.metrics},
                 {"k", a.k},
                 {"mode", to_string(mode)},
                 {"probes", a.probes},
                 {"sweep_k", a.sweep_k},
                 {"sweep_fraction", a.sweep_fraction},
                 {"seed", a.seed},
                 {"gold", a.gold.empty() ? json(nullptr) : json(abs_input(a.gold))},
                 {"polarity", a.polarity},
                 {"system", a.system},
                 {"domain", a.domain},
                 {"threads", resolve_threads(a.threads)}};

  const auto store = Datastore::open(interchange::resolve_input_path(a.datastore));
  const auto bundle = interchange::load_bundle(
      a.manifest, a.vectors, a.embeddings.empty() ? std::nullopt : std::optional<fs::path>(a.embeddings));
  std::map<std::string, SegmentKey> keys;
  for (const auto& s : bundle.sentences) {
    keys[s.sentence_id] = {s.system.value_or(a.system), s.domain.value_or(a.domain), s.sentence_id};
  }

  std::optional<IvfIndex> ivf;
  if (mode == SearchMode::kIvf) {
    ivf = IvfIndex::load(interchange::resolve_input_path(a.datastore) / "ivf.kqe", store);
  }
  ScoringOptions options;
  options.search = {mode, a.probes, a.threads};
  options.ivf = ivf ? &*ivf : nullptr;

  const fs::path root = a.out;
  ensure_dir(root);
  std::vector<SweepRow> rows;

  auto emit = [&](const fs::path& dir, std::vector<QEMetricSeries> series, SweepRow proto) {
    ensure_dir(dir);
    if (want_ensemble) series.push_back(ensemble(series));
    for (const auto& s : series) {
      const auto frag = to_fragment(s, keys);
      interchange::write_score_table(dir / (std::string(s.metric.id) + ".tsv"), frag);
      if (s.token_scores) write_token_scores(dir / (std::string(s.metric.id) + ".tokens.jsonl"), s);
      SweepRow row = proto;
      row.metric = std::string(s.metric.id);
      if (!uses_neighbors(s.metric.name)) row.k = "NA";
      row.segments = s.scores.size();
      double sum = 0.0;
      for (const auto& [_, v] : s.scores) sum += v;
      row.mean = sum / static_cast<double>(s.scores.size());
      if (gold) {
        const ScoreFragment tables[] = {frag, *gold};
        const auto matrix = interchange::align_tables(tables);
        row.spearman = spearman(oriented_column(matrix, frag.name), oriented_column(matrix, gold->name));
      }
      rows.push_back(std::move(row));
    }
  };

  auto requests_for = [&](std::size_t k) {
    std::vector<MetricRequest> req;
    for (auto m : base) req.push_back({m, uses_neighbors(m) ? k : 0});
    return req;
  };

  if (!a.sweep_k.empty()) {
    // One retrieval at the largest k serves every point of the sweep.
    std::vector<MetricRequest> all;
    for (std::size_t k : a.sweep_k) {
      if (k == 0) throw InvalidArgument("--sweep-k values must be positive");
      for (const auto& r : requests_for(k)) all.push_back(r);
    }
    auto series = score_corpus(store, bundle, all, options);
    for (std::size_t i = 0; i < a.sweep_k.size(); ++i) {
      const std::size_t k = a.sweep_k[i];
      std::vector<QEMetricSeries> point(std::make_move_iterator(series.begin() + i * base.size()),
                                        std::make_move_iterator(series.begin() + (i + 1) * base.size()));
      emit(root / ("k" + std::to_string(k)), std::move(point),
           {"k" + std::to_string(k), static_cast<double>(k), "", std::to_string(k), 1.0, 0, 0.0, std::nullopt});
    }
  } else if (!a.sweep_fraction.empty()) {
    for (double f : a.sweep_fraction) {
      const auto sampled = f == 1.0 ? store : store.sample(f, a.seed);
      auto series = score_corpus(sampled, bundle, requests_for(a.k), options);
      const std::string k = a.k == 0 ? "default" : std::to_string(a.k);
      emit(root / ("fraction" + fmt(f)), std::move(series), {"fraction" + fmt(f), f, "", k, f, 0, 0.0, std::nullopt});
    }
  } else {
    auto series = score_corpus(store, bundle, requests_for(a.k), options);
    const std::string k = a.k == 0 ? "default" : std::to_string(a.k);
    emit(root, std::move(series), {"single", 0.0, "", k, 1.0, 0, 0.0, std::nullopt});
  }

  // Effective k per metric for the summary when the default was used.
  for (auto& row : rows) {
    if (row.k != "default") continue;
    const auto name = parse_metric(row.metric);
    row.k = std::to_string(describe(*name).default_k);
  }

  if (!a.sweep_k.empty() || !a.sweep_fraction.empty()) {
    std::string tsv = "point\tmetric\tk\tfraction\tsegments\tmean_score";
    if (gold) tsv += "\tspearman";
    tsv += "\n";
    for (const auto& r : rows) {
      tsv += r.point + "\t" + r.metric + "\t" + r.k + "\t" + fmt(r.fraction) + "\t" + std::to_string(r.segments) +
             "\t" + fmt(r.mean);
      if (gold) tsv += "\t" + fmt(*r.spearman);
      tsv += "\n";
    }
    write_text(root / "sweep.tsv", tsv);
    if (gold) {
      detail::Plot plot{"Sweep", a.sweep_k.empty() ? "datastore fraction" : "k", "Spearman vs gold", {}};
      std::map<std::string, std::size_t> index;
      for (const auto& r : rows) {
        auto [it, fresh] = index.try_emplace(r.metric, plot.series.size());
        if (fresh) plot.series.push_back({r.metric, {}, true});
        plot.series[it->second].points.push_back({r.x, *r.spearman, r.point});
      }
      write_text(root / "sweep.svg", detail::render_svg(plot));
    }
  }
  write_run_json(root, "score", std::move(config));
  for (const auto& r : rows) {
    out << r.point << "\t" << r.metric << "\tmean=" << fmt(r.mean);
    if (r.spearman) out << "\tspearman=" << fmt(*r.spearman);
    out << "\n";
  }
  return 0;
}

// ---- ref-score --------------------------------------------------------------

struct RefScoreArgs {
  std::string metric, hyp, out, keys;
  std::vector<std::string> refs;
  std::string system = "default";
  std::string domain = "default";
  unsigned threads = 0;
};

int cmd_ref_score(const RefScoreArgs& a, std::ostream& out) {
  const auto metric = parse_lexical_metric(a.metric);
  if (!metric) throw InvalidArgument("--metric must be bleu or chrf");
  json config = {{"metric", a.metric},
                 {"hyp", abs_input(a.hyp)},
                 {"refs", [&] {
                    std::vector<std::string> r;
                    for (const auto& f : a.refs) r.push_back(abs_input(f));
                    return r;
                  }()},
                 {"keys", a.keys.empty() ? json(nullptr) : json(abs_input(a.keys))},
                 {"out", abs_output(a.out)},
                 {"system", a.system},
                 {"domain", a.domain},
                 {"threads", resolve_threads(a.threads)}};

  const auto hyps = read_lines(a.hyp);
  const auto keys = line_keys(a.keys, a.system, a.domain, hyps.size());
  const auto refs = load_references(a.refs, {}, keys);
  ScoreFragment frag{std::string(to_string(*metric)), Polarity::kHigherIsBetter, {}};
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto& r = refs.refs.at(keys[i]);
    std::vector<std::string> texts;
    for (const auto& ref : r) texts.push_back(ref.text);
    try {
      frag.scores[keys[i]] = reference_score(*metric, hyps[i], texts);
    } catch (const InvalidArgument& e) {
      throw DataError("hypothesis line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  const fs::path out_path = a.out;
  if (out_path.has_parent_path()) ensure_dir(out_path.parent_path());
  interchange::write_score_table(out_path, frag);
  write_run_json(out_path.has_parent_path() ? out_path.parent_path() : fs::path("."), "ref-score",
                 std::move(config));
  out << a.metric << ": " << frag.scores.size() << " segments -> " << out_path.string() << "\n";
  return 0;
}

// ---- meta-eval --------------------------------------------------------------

struct MetaEvalArgs {
  std::string human, out, group_by;
  std::vector<std::string> qe, rb, polarity;
  bool svg = false;
  std::string ablation_metric, ablation_hyp, ablation_keys, ablation_subsets;
  std::vector<std::string> ablation_refs, ablation_synthetic;
  std::string system = "default";
  std::string domain = "default";
  unsigned threads = 0;
};

json report_json(const RankingReport& r) {
  json j = {{"qe_names", r.qe_names}, {"segments", r.segments}, {"skipped", r.skipped}};
  if (r.grouping) {
    j["grouping"] = {{"dimension", to_string(r.grouping->dimension)}, {"key", r.grouping->key}};
  } else {
    j["grouping"] = nullptr;
  }
  if (r.skipped) {
    j["skip_reason"] = r.skip_reason;
    return j;
  }
  j["mg"] = r.mg;
  j["mr"] = r.mr;
  j["ranking_corr"] = r.ranking_corr;
  j["seg_corr"] = r.seg_corr;
  return j;
}

std::vector<std::vector<std::size_t>> parse_subsets(const std::string& text) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& part : split(text, ';')) {
    std::vector<std::size_t> subset;
    for (const auto& item : split(part, ',')) {
      std::size_t v = 0;
      const auto* end = item.data() + item.size();
      auto [p, ec] = std::from_chars(item.data(), end, v);
      if (item.empty() || ec != std::errc() || p != end) {
        throw InvalidArgument("--ablation-subsets: bad reference index '" + item + "'");
      }
      subset.push_back(v);
    }
    out.push_back(std::move(subset));
  }
  return out;
}

int cmd_meta_eval(const MetaEvalArgs& a, std::ostream& out) {
  if (a.qe.size() < 2) throw InvalidArgument("meta-eval needs at least two --qe tables");
  if (a.rb.empty()) throw InvalidArgument("meta-eval needs at least one --rb table");
  std::optional<GroupBy> group_by;
  if (!a.group_by.empty()) {
    group_by = parse_group_by(a.group_by);
    if (!group_by) throw InvalidArgument("unknown grouping column '" + a.group_by + "' (use domain or system)");
  }
  const bool ablation = !a.ablation_hyp.empty();
  if (ablation && (a.ablation_refs.empty() || a.ablation_subsets.empty() || a.ablation_metric.empty())) {
    throw InvalidArgument("ablation needs --ablation-metric, --ablation-refs and --ablation-subsets");
  }
  const auto overrides = parse_polarity_overrides(a.polarity);

  auto abs_all = [](std::span<const std::string> v) {
    std::vector<std::string> r;
    for (const auto& p : v) r.push_back(abs_input(p));
    return r;
  };
  json config = {{"human", abs_input(a.human)},
                 {"qe", abs_all(a.qe)},
                 {"rb", abs_all(a.rb)},
                 {"polarity", a.polarity},
                 {"group_by", a.group_by.empty() ? json(nullptr) : json(a.group_by)},
                 {"svg", a.svg},
                 {"out", abs_output(a.out)},
                 {"threads", resolve_threads(a.threads)}};
  if (ablation) {
    config["ablation"] = {{"metric", a.ablation_metric},
                          {"hyp", abs_input(a.ablation_hyp)},
                          {"refs", abs_all(a.ablation_refs)},
                          {"synthetic_refs", abs_all(a.ablation_synthetic)},
                          {"keys", a.ablation_keys.empty() ? json(nullptr) : json(abs_input(a.ablation_keys))},
                          {"subsets", a.ablation_subsets},
                          {"system", a.system},
                          {"domain", a.domain}};
  }

  std::vector<ScoreFragment> tables;
  tables.push_back(load_human(a.human, overrides));
  const std::string h_name = tables[0].name;
  std::vector<std::string> qe_names, rb_names;
  for (const auto& p : a.qe) {
    tables.push_back(load_metric(p, overrides));
    qe_names.push_back(tables.back().name);
  }
  for (const auto& p : a.rb) {
    tables.push_back(load_metric(p, overrides));
    rb_names.push_back(tables.back().name);
  }
  const auto matrix = interchange::align_tables(tables);

  std::vector<RankingReport> reports;
  if (group_by) {
    reports = grouped_report(matrix, qe_names, rb_names, h_name, *group_by);
  } else {
    reports.push_back(ranking_report(matrix, qe_names, rb_names, h_name));
  }

  json columns = json::array();
  for (std::size_t c = 0; c < matrix.names.size(); ++c) {
    const bool lower = matrix.polarity[c] == Polarity::kLowerIsBetter;
    columns.push_back({{"name", matrix.names[c]},
                       {"role", matrix.names[c] == h_name ? "human"
                                : std::find(qe_names.begin(), qe_names.end(), matrix.names[c]) != qe_names.end()
                                    ? "qe"
                                    : "rb"},
                       {"polarity", to_string(matrix.polarity[c])},
                       {"negated", lower}});
  }
  json dropped = json::array();
  for (const auto& d : matrix.dropped) {
    std::vector<std::string> keys;
    for (const auto& k : d.keys) keys.push_back(interchange::to_string(k));
    dropped.push_back({{"table", d.table}, {"keys", keys}});
  }
  json doc = {{"correlation", "spearman (average ranks)"},
              {"orientation", "lower_is_better columns negated before correlation"},
              {"human", h_name},
              {"segments", matrix.rows()},
              {"columns", columns},
              {"dropped", dropped},
              {"reports", json::array()}};
  for (const auto& r : reports) doc["reports"].push_back(report_json(r));

  std::string tsv = "group_by\tgroup\trb_name\tseg_corr\tranking_corr\tstatus\n";
  detail::Plot plot{"Segment vs ranking performance", "segment-level Spearman (RB vs human)",
                    "QE ranking Spearman (MR vs MG)", {}};
  std::map<std::string, std::size_t> plot_index;
  for (const auto& r : reports) {
    const std::string dim = r.grouping ? std::string(to_string(r.grouping->dimension)) : "all";
    const std::string group = r.grouping ? r.grouping->key : "all";
    for (const auto& rb : rb_names) {
      if (r.skipped) {
        tsv += dim + "\t" + group + "\t" + rb + "\tNA\tNA\tskipped\n";
        continue;
      }
      tsv += dim + "\t" + group + "\t" + rb + "\t" + fmt(r.seg_corr.at(rb)) + "\t" + fmt(r.ranking_corr.at(rb)) +
             "\tok\n";
      auto [it, fresh] = plot_index.try_emplace(rb, plot.series.size());
      if (fresh) plot.series.push_back({rb, {}, false});
      plot.series[it->second].points.push_back({r.seg_corr.at(rb), r.ranking_corr.at(rb), rb + " / " + group});
    }
  }

  const fs::path dir = a.out;
  ensure_dir(dir);
  if (ablation) {
    const auto metric = parse_lexical_metric(a.ablation_metric);
    if (!metric) throw InvalidArgument("--ablation-metric must be bleu or chrf");
    const auto hyps = read_lines(a.ablation_hyp);
    const auto keys = line_keys(a.ablation_keys, a.system, a.domain, hyps.size());
    const auto refs = load_references(a.ablation_refs, a.ablation_synthetic, keys);
    std::map<SegmentKey, std::string> hyp_map;
    for (std::size_t i = 0; i < keys.size(); ++i) hyp_map[keys[i]] = hyps[i];
    const auto subsets = parse_subsets(a.ablation_subsets);
    const auto points = reference_ablation(hyp_map, refs, *metric, subsets, matrix, qe_names, h_name);
    std::string ab = "subset\tseg_corr\tranking_corr\n";
    json jpoints = json::array();
    for (const auto& p : points) {
      std::string label;
      for (std::size_t i = 0; i < p.subset.size(); ++i) label += (i ? "," : "") + std::to_string(p.subset[i]);
      ab += label + "\t" + fmt(p.seg_corr) + "\t" + fmt(p.ranking_corr) + "\n";
      jpoints.push_back({{"subset", p.subset}, {"mr", p.mr}, {"seg_corr", p.seg_corr},
                         {"ranking_corr", p.ranking_corr}});
    }
    doc["ablation"] = {{"metric", a.ablation_metric}, {"points", jpoints}};
    write_text(dir / "ablation.tsv", ab);
  }

  write_text(dir / "report.json", doc.dump(2) + "\n");
  write_text(dir / "report.tsv", tsv);
  if (a.svg) write_text(dir / "scatter.svg", detail::render_svg(plot));
  write_run_json(dir, "meta-eval", std::move(config));
  out << tsv;
  return 0;
}

// ---- token-eval -------------------------------------------------------------

struct TokenEvalArgs {
  std::vector<std::string> scores;
  std::string labels, out, polarity, f1_class = "bad";
  unsigned threads = 0;
};

int cmd_token_eval(const TokenEvalArgs& a, std::ostream& out) {
  std::optional<Polarity> polarity;
  if (!a.polarity.empty()) {
    polarity = parse_polarity(a.polarity);
    if (!polarity) throw InvalidArgument("--polarity must be higher or lower");
  }
  const F1Class primary = a.f1_class == "ok" ? F1Class::kOk : F1Class::kBad;
  const F1Class other = primary == F1Class::kOk ? F1Class::kBad : F1Class::kOk;
  std::vector<std::string> score_paths;
  for (const auto& p : a.scores) score_paths.push_back(abs_input(p));
  json config = {{"scores", score_paths},
                 {"labels", abs_input(a.labels)},
                 {"polarity", a.polarity.empty() ? json(nullptr) : json(a.polarity)},
                 {"class", to_string(primary)},
                 {"out", abs_output(a.out)},
                 {"threads", resolve_threads(a.threads)}};

  const auto labels = read_token_labels(a.labels);
  std::string tsv = "metric\tpearson\tbest_threshold\tf1\tf1_class\tother_threshold\tother_f1\n";
  for (const auto& path : a.scores) {
    const auto series = read_token_scores(path, polarity);
    const double r = token_pearson(series, labels);
    const auto best = best_f1(series, labels, primary);
    const auto alt = best_f1(series, labels, other);
    tsv += std::string(series.metric.id) + "\t" + fmt(r) + "\t" + fmt(best.threshold) + "\t" + fmt(best.f1) + "\t" +
           std::string(to_string(primary)) + "\t" + fmt(alt.threshold) + "\t" + fmt(alt.f1) + "\n";
  }
  const fs::path dir = a.out;
  ensure_dir(dir);
  write_text(dir / "token_eval.tsv", tsv);
  write_run_json(dir, "token-eval", std::move(config));
  out << tsv;
  return 0;
}

// ---- validate ---------------------------------------------------------------

struct ValidateArgs {
  std::string manifest, vectors, embeddings, out;
};

int cmd_validate(const ValidateArgs& a, std::ostream& out) {
  std::vector<fs::path> tensors{a.vectors};
  if (!a.embeddings.empty()) tensors.emplace_back(a.embeddings);
  const auto report = interchange::validate_bundle(a.manifest, tensors);
  if (!a.out.empty()) {
    const fs::path dir = a.out;
    ensure_dir(dir);
    write_text(dir / "violations.txt", interchange::format_violations(report));
    write_run_json(dir, "validate",
                   {{"manifest", abs_input(a.manifest)},
                    {"vectors", abs_input(a.vectors)},
                    {"embeddings", a.embeddings.empty() ? json(nullptr) : json(abs_input(a.embeddings))},
                    {"out", abs_output(a.out)}});
  }
  if (report.empty()) {
    out << "ok: no violations\n";
    return 0;
  }
  out << interchange::format_violations(report);
  return static_cast<int>(ExitCode::kValidation);
}

}  // namespace

int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"kNN-based quality estimation and automatic QE evaluation", "knnqe"};
  app.require_subcommand(1);

  BuildArgs build;
  auto* b = app.add_subcommand("build", "Build a token datastore from a train-side bundle");
  b->add_option("--bundle", build.manifest, "Sentence manifest (JSONL)")->required();
  b->add_option("--vectors", build.vectors, "Token vector tensor file")->required();
  b->add_option("--embeddings", build.embeddings, "Sentence embedding tensor file");
  b->add_option("--out", build.out, "Datastore directory")->required();
  b->add_option("--fraction", build.fraction, "Keep this fraction of sentences, in (0, 1]");
  b->add_option("--seed", build.seed, "Seed for sampling and k-means");
  b->add_option("--ivf-clusters", build.ivf_clusters, "Also build an IVF index with this many clusters");
  b->add_option("--ivf-train-points", build.ivf_train_points, "k-means training sample size (0 = all)");
  b->add_option("--ivf-iterations", build.ivf_iterations, "Maximum k-means iterations")->check(CLI::PositiveNumber);
  b->add_flag("--allow-test-side", build.allow_test_side, "Accept a test-side manifest");
  b->add_option("--threads", build.threads, "Worker threads (0 = all cores)");

  ScoreArgs score;
  auto* s = app.add_subcommand("score", "Score test segments with kNN QE metrics");
  s->add_option("--datastore", score.datastore, "Datastore directory")->required();
  s->add_option("--bundle", score.manifest, "Test-side sentence manifest")->required();
  s->add_option("--vectors", score.vectors, "Test-side token vectors")->required();
  s->add_option("--embeddings", score.embeddings, "Test-side sentence embeddings");
  s->add_option("--metric", score.metrics, "Metrics, comma separated (ensemble combines the others)")
      ->delimiter(',');
  s->add_option("-k,--k", score.k, "Neighbours per token (default: per metric)");
  s->add_option("--mode", score.mode, "exact or ivf")->check(CLI::IsMember({"exact", "ivf"}));
  s->add_option("--probes", score.probes, "Clusters probed in ivf mode")->check(CLI::PositiveNumber);
  s->add_option("--sweep-k", score.sweep_k, "Score at each k, e.g. 1,2,4,8")->delimiter(',');
  s->add_option("--sweep-fraction", score.sweep_fraction, "Score on nested datastore samples")->delimiter(',');
  s->add_option("--seed", score.seed, "Seed for datastore sampling");
  s->add_option("--gold", score.gold, "Score table to correlate each sweep point with");
  s->add_option("--polarity", score.polarity, "NAME=higher|lower for the gold table");
  s->add_option("--system", score.system, "System name for segments without one");
  s->add_option("--domain", score.domain, "Domain for segments without one");
  s->add_option("--out", score.out, "Output directory")->required();
  s->add_option("--threads", score.threads, "Worker threads (0 = all cores)");

  RefScoreArgs ref;
  auto* r = app.add_subcommand("ref-score", "Score hypotheses with BLEU or chrF");
  r->add_option("--metric", ref.metric, "bleu or chrf")->required()->check(CLI::IsMember({"bleu", "chrf"}));
  r->add_option("--hyp", ref.hyp, "Hypotheses, one per line")->required();
  r->add_option("--refs", ref.refs, "Reference files, comma separated")->required()->delimiter(',');
  r->add_option("--keys", ref.keys, "TSV with system, domain, seg_id per line");
  r->add_option("--system", ref.system, "System name when no keys file is given");
  r->add_option("--domain", ref.domain, "Domain when no keys file is given");
  r->add_option("--out", ref.out, "Output score table")->required();
  r->add_option("--threads", ref.threads, "Worker threads (0 = all cores)");

  MetaEvalArgs meta;
  auto* m = app.add_subcommand("meta-eval", "Rank QE metrics against human and reference-based scores");
  m->add_option("--human", meta.human, "Human score table")->required();
  m->add_option("--qe", meta.qe, "QE score tables, comma separated")->required()->delimiter(',');
  m->add_option("--rb", meta.rb, "Reference-based score tables, comma separated")->required()->delimiter(',');
  m->add_option("--polarity", meta.polarity, "NAME=higher|lower, repeatable");
  m->add_option("--group-by", meta.group_by, "domain or system");
  m->add_flag("--svg", meta.svg, "Also write scatter.svg");
  m->add_option("--ablation-metric", meta.ablation_metric, "bleu or chrf for the reference ablation");
  m->add_option("--ablation-hyp", meta.ablation_hyp, "Hypotheses for the reference ablation");
  m->add_option("--ablation-refs", meta.ablation_refs, "Human reference files")->delimiter(',');
  m->add_option("--ablation-synthetic-refs", meta.ablation_synthetic, "Synthetic reference files")
      ->delimiter(',');
  m->add_option("--ablation-keys", meta.ablation_keys, "TSV with system, domain, seg_id per line");
  m->add_option("--ablation-subsets", meta.ablation_subsets, "Reference index subsets, e.g. \"0;0,1\"");
  m->add_option("--system", meta.system, "System name when no keys file is given");
  m->add_option("--domain", meta.domain, "Domain when no keys file is given");
  m->add_option("--out", meta.out, "Output directory")->required();
  m->add_option("--threads", meta.threads, "Worker threads (0 = all cores)");

  TokenEvalArgs tok;
  auto* t = app.add_subcommand("token-eval", "Token-level Pearson and best-threshold F1");
  t->add_option("--scores", tok.scores, "Token score files (*.tokens.jsonl)")->required()->delimiter(',');
  t->add_option("--labels", tok.labels, "Token labels (JSONL)")->required();
  t->add_option("--polarity", tok.polarity, "Override the metric's polarity (higher or lower)");
  t->add_option("--class", tok.f1_class, "F1 target class")->check(CLI::IsMember({"bad", "ok"}));
  t->add_option("--out", tok.out, "Output directory")->required();
  t->add_option("--threads", tok.threads, "Worker threads (0 = all cores)");

  ValidateArgs val;
  auto* v = app.add_subcommand("validate", "Check an interchange bundle");
  v->add_option("--bundle", val.manifest, "Sentence manifest (JSONL)")->required();
  v->add_option("--vectors", val.vectors, "Token vector tensor file")->required();
  v->add_option("--embeddings", val.embeddings, "Sentence embedding tensor file");
  v->add_option("--out", val.out, "Directory for violations.txt and run.json");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*b) return cmd_build(build, out);
    if (*s) return cmd_score(score, out);
    if (*r) return cmd_ref_score(ref, out);
    if (*m) return cmd_meta_eval(meta, out);
    if (*t) return cmd_token_eval(tok, out);
    if (*v) return cmd_validate(val, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return static_cast<int>(ExitCode::kRuntime);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kRuntime);
  }
  return static_cast<int>(ExitCode::kUsage);
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace knnqe
