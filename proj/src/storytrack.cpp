#include "cprobe/storytrack.hpp"

#include "cprobe/csv.hpp"
#include "cprobe/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace cprobe::storytrack {
namespace {

// Linear-interpolation quantile of sorted data.
double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

int label_of(const TrackTrace& t, int sentence) {
  if (sentence >= 1 && static_cast<std::size_t>(sentence) <= t.sentence_labels.size()) {
    return t.sentence_labels[static_cast<std::size_t>(sentence - 1)];
  }
  return -1;
}

int to_int(const std::string& s, const char* what, std::size_t row) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValueError(row, std::string("bad ") + what + " '" + s + "' on row " + std::to_string(row));
  }
}

}  // namespace

std::string_view to_string(TraceKind kind) {
  return kind == TraceKind::final_subword ? "final_subword" : "cumulative_mean";
}

TraceKind parse_trace_kind(std::string_view text) {
  if (text == "final_subword") return TraceKind::final_subword;
  if (text == "cumulative_mean") return TraceKind::cumulative_mean;
  throw SchemaError("unknown trace kind '" + std::string(text) + "'");
}

RepresentativeKind probe_kind_for(TraceKind kind) {
  return kind == TraceKind::final_subword ? RepresentativeKind::nth : RepresentativeKind::mean;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const auto start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

TrackTrace track(const MatrixF& tokens,
                 const embedstore::TokenAlignment& alignment,
                 const probekit::Probe& probe,
                 TraceKind kind) {
  alignment.validate();
  if (tokens.rows() != alignment.num_tokens) {
    throw AlignmentError("story " + alignment.story_id + " has " + std::to_string(tokens.rows()) +
                         " token embeddings but the alignment expects " + std::to_string(alignment.num_tokens));
  }
  if (probe.kind != probe_kind_for(kind)) {
    throw ConfigError(std::string(to_string(kind)) + " tracking needs a probe trained on " +
                      std::string(cprobe::to_string(probe_kind_for(kind))) + " embeddings");
  }

  TrackTrace trace;
  trace.story_id = alignment.story_id;
  trace.layer = probe.layer;
  trace.kind = kind;
  trace.words = alignment.words;
  trace.word_sentence_index = alignment.word_sentence_index;
  trace.sentence_labels = alignment.sentence_labels;
  trace.outputs.reserve(alignment.words.size());

  if (kind == TraceKind::final_subword) {
    for (const int idx : alignment.word_final_token_index) {
      const auto row = tokens.row(idx);
      trace.outputs.push_back(probekit::score(probe, std::span<const float>(row.data(), static_cast<std::size_t>(row.size()))));
    }
    return trace;
  }

  Eigen::VectorXd running = Eigen::VectorXd::Zero(tokens.cols());
  Eigen::Index consumed = 0;
  std::vector<float> mean(static_cast<std::size_t>(tokens.cols()));
  for (const int idx : alignment.word_final_token_index) {
    for (; consumed <= idx; ++consumed) running += tokens.row(consumed).transpose().cast<double>();
    for (Eigen::Index c = 0; c < tokens.cols(); ++c) {
      mean[static_cast<std::size_t>(c)] = static_cast<float>(running[c] / static_cast<double>(consumed));
    }
    trace.outputs.push_back(probekit::score(probe, mean));
  }
  return trace;
}

std::vector<float> smooth(const std::vector<float>& values, int window) {
  if (window < 1) throw ConfigError("smoothing window must be at least 1");
  std::vector<float> out(values.size());
  const auto w = static_cast<std::size_t>(window);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t first = i + 1 >= w ? i + 1 - w : 0;
    double sum = 0.0;
    for (std::size_t j = first; j <= i; ++j) sum += values[j];
    out[i] = static_cast<float>(sum / static_cast<double>(i + 1 - first));
  }
  return out;
}

AggregateTrace aggregate(const std::vector<TrackTrace>& traces, int num_sentences) {
  AggregateTrace agg;
  struct Usable {
    const TrackTrace* trace;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) word range per sentence
  };
  std::vector<Usable> usable;
  for (const auto& t : traces) {
    if (t.word_sentence_index.size() != t.outputs.size()) {
      agg.rejected.push_back(t.story_id);
      continue;
    }
    std::vector<std::pair<std::size_t, std::size_t>> ranges(static_cast<std::size_t>(num_sentences), {0, 0});
    std::vector<bool> seen(static_cast<std::size_t>(num_sentences), false);
    bool ok = !t.outputs.empty();
    int previous = 1;
    for (std::size_t w = 0; w < t.word_sentence_index.size() && ok; ++w) {
      const int s = t.word_sentence_index[w];
      if (s < previous || s > num_sentences || s < 1) {
        ok = false;
        break;
      }
      auto& r = ranges[static_cast<std::size_t>(s - 1)];
      if (!seen[static_cast<std::size_t>(s - 1)]) {
        seen[static_cast<std::size_t>(s - 1)] = true;
        r.first = w;
      }
      r.second = w + 1;
      previous = s;
    }
    ok = ok && std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
    if (!ok) {
      agg.rejected.push_back(t.story_id);
      continue;
    }
    usable.push_back({&t, std::move(ranges)});
  }
  if (usable.empty()) {
    throw DataError("no trace spans exactly " + std::to_string(num_sentences) + " sentences");
  }
  agg.n_stories = static_cast<int>(usable.size());

  agg.max_length.assign(static_cast<std::size_t>(num_sentences), 0);
  for (const auto& u : usable) {
    for (int s = 0; s < num_sentences; ++s) {
      const auto& r = u.ranges[static_cast<std::size_t>(s)];
      agg.max_length[static_cast<std::size_t>(s)] =
          std::max(agg.max_length[static_cast<std::size_t>(s)], static_cast<int>(r.second - r.first));
    }
  }
  int total = 0;
  for (int s = 0; s < num_sentences; ++s) {
    agg.sentence_start.push_back(total);
    total += agg.max_length[static_cast<std::size_t>(s)];
  }

  std::vector<double> sum(static_cast<std::size_t>(total), 0.0);
  agg.count.assign(static_cast<std::size_t>(total), 0);
  agg.sentence.resize(static_cast<std::size_t>(total));
  for (int s = 0; s < num_sentences; ++s) {
    for (int p = 0; p < agg.max_length[static_cast<std::size_t>(s)]; ++p) {
      agg.sentence[static_cast<std::size_t>(agg.sentence_start[static_cast<std::size_t>(s)] + p)] = s + 1;
    }
  }
  for (const auto& u : usable) {
    for (int s = 0; s < num_sentences; ++s) {
      const auto& r = u.ranges[static_cast<std::size_t>(s)];
      const auto len = static_cast<int>(r.second - r.first);
      const int offset = agg.sentence_start[static_cast<std::size_t>(s)] + agg.max_length[static_cast<std::size_t>(s)] - len;
      for (int k = 0; k < len; ++k) {
        const auto pos = static_cast<std::size_t>(offset + k);
        sum[pos] += u.trace->outputs[r.first + static_cast<std::size_t>(k)];
        ++agg.count[pos];
      }
    }
    if (agg.sentence_labels.empty() && static_cast<int>(u.trace->sentence_labels.size()) == num_sentences) {
      agg.sentence_labels = u.trace->sentence_labels;
    }
  }
  agg.mean.resize(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) {
    agg.mean[i] = agg.count[i] > 0 ? sum[i] / agg.count[i] : std::nan("");
  }
  return agg;
}

std::string_view to_string(Segment segment) {
  switch (segment) {
    case Segment::paragraph1: return "paragraph1";
    case Segment::transition1: return "transition1";
    case Segment::paragraph2: return "paragraph2";
    case Segment::transition2: return "transition2";
    case Segment::paragraph3: return "paragraph3";
  }
  return "unknown";
}

Segment segment_of(int sentence) {
  if (sentence < 1 || sentence > 32) throw RangeError("sentence " + std::to_string(sentence) + " outside 1..32");
  if (sentence <= 10) return Segment::paragraph1;
  if (sentence == 11) return Segment::transition1;
  if (sentence <= 21) return Segment::paragraph2;
  if (sentence == 22) return Segment::transition2;
  return Segment::paragraph3;
}

bool is_transition(Segment segment) {
  return segment == Segment::transition1 || segment == Segment::transition2;
}

double silverman_bandwidth(std::vector<double> values) {
  const auto n = values.size();
  if (n < 2) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (const double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  std::sort(values.begin(), values.end());
  const double iqr = (quantile(values, 0.75) - quantile(values, 0.25)) / 1.34;
  double spread = std::min(sd, iqr);
  if (spread <= 0.0) spread = std::max(sd, iqr);
  return 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
}

double trapezoid(const std::vector<double>& grid, const std::vector<double>& values) {
  double area = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    area += 0.5 * (values[i] + values[i - 1]) * (grid[i] - grid[i - 1]);
  }
  return area;
}

SegmentKDE segment_kde(const std::vector<TrackTrace>& traces, int layer, int grid_points) {
  if (traces.empty()) throw DataError("segment_kde needs at least one trace");
  if (grid_points < 2) throw ConfigError("KDE grid needs at least two points");

  std::array<std::vector<double>, kSegments.size()> pooled;
  for (const auto& t : traces) {
    if (t.word_sentence_index.size() != t.outputs.size()) {
      throw AlignmentError("trace " + t.story_id + " lacks a sentence index per word");
    }
    for (std::size_t w = 0; w < t.outputs.size(); ++w) {
      pooled[static_cast<std::size_t>(segment_of(t.word_sentence_index[w]))].push_back(t.outputs[w]);
    }
  }

  SegmentKDE kde;
  kde.layer = layer;
  const double step = 1.0 / static_cast<double>(grid_points - 1);
  for (int g = 0; g < grid_points; ++g) kde.grid.push_back(static_cast<double>(g) * step);

  for (std::size_t s = 0; s < kSegments.size(); ++s) {
    SegmentDensity d;
    d.segment = kSegments[s];
    const auto& xs = pooled[s];
    d.n = xs.size();
    if (xs.size() == 1) d.point_mass = xs.front();
    if (xs.size() >= 2) {
      d.bandwidth = std::max(silverman_bandwidth(xs), step);
      const double norm = 1.0 / (static_cast<double>(xs.size()) * d.bandwidth * std::sqrt(2.0 * std::numbers::pi));
      d.density.resize(kde.grid.size());
      for (std::size_t g = 0; g < kde.grid.size(); ++g) {
        double acc = 0.0;
        for (const double x : xs) {
          const double u = (kde.grid[g] - x) / d.bandwidth;
          acc += std::exp(-0.5 * u * u);
        }
        d.density[g] = acc * norm;
      }
      const double area = trapezoid(kde.grid, d.density);
      if (area > 0.0) {
        for (auto& v : d.density) v /= area;
      }
    }
    kde.segments.push_back(std::move(d));
  }
  return kde;
}

LayerScore separation_score(const std::vector<TrackTrace>& traces, int layer) {
  LayerScore score;
  score.layer = layer;
  std::size_t above = 0;
  std::size_t below = 0;
  for (const auto& t : traces) {
    if (t.word_sentence_index.size() != t.outputs.size()) {
      throw AlignmentError("trace " + t.story_id + " lacks a sentence index per word");
    }
    for (std::size_t w = 0; w < t.outputs.size(); ++w) {
      if (is_transition(segment_of(t.word_sentence_index[w]))) {
        ++score.n_transition;
        above += t.outputs[w] > 0.5f;
      } else {
        ++score.n_paragraph;
        below += t.outputs[w] < 0.5f;
      }
    }
  }
  score.transition_above = score.n_transition ? static_cast<double>(above) / static_cast<double>(score.n_transition) : 0.0;
  score.paragraph_below = score.n_paragraph ? static_cast<double>(below) / static_cast<double>(score.n_paragraph) : 0.0;
  score.separation = 0.5 * score.transition_above + 0.5 * score.paragraph_below;
  return score;
}

BestLayer select_best_layer(const std::map<int, std::vector<TrackTrace>>& per_layer) {
  if (per_layer.empty()) throw DataError("select_best_layer needs at least one layer");
  BestLayer best;
  double best_score = -1.0;
  for (const auto& [layer, traces] : per_layer) {
    best.table.push_back(separation_score(traces, layer));
    if (best.table.back().separation > best_score) {
      best_score = best.table.back().separation;
      best.layer = layer;
    }
  }
  return best;
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TrackTrace>& traces, int window) {
  std::ostringstream out;
  write_csv_row(out, {"word_index", "raw", "smoothed", "sentence", "label", "story_id", "layer", "kind", "word"});
  for (const auto& t : traces) {
    const auto smoothed = smooth(t.outputs, window);
    for (std::size_t w = 0; w < t.outputs.size(); ++w) {
      const int sentence = w < t.word_sentence_index.size() ? t.word_sentence_index[w] : 0;
      const int label = label_of(t, sentence);
      write_csv_row(out, {std::to_string(w + 1), format_number(t.outputs[w]), format_number(smoothed[w]),
                          std::to_string(sentence), label < 0 ? "" : std::to_string(label), t.story_id,
                          std::to_string(t.layer), std::string(to_string(t.kind)),
                          w < t.words.size() ? t.words[w] : ""});
    }
  }
  write_text_file(path, out.str());
}

std::vector<TrackTrace> read_trace_csv(const std::filesystem::path& path) {
  const auto table = read_csv(path);
  const auto c_index = table.require_column("word_index");
  const auto c_raw = table.require_column("raw");
  const auto c_sentence = table.require_column("sentence");
  const auto c_label = table.require_column("label");
  const auto c_story = table.require_column("story_id");
  const auto c_layer = table.require_column("layer");
  const auto c_kind = table.require_column("kind");
  const auto c_word = table.column("word");

  std::vector<TrackTrace> traces;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (row.size() < table.header.size()) {
      throw SchemaError("trace row " + std::to_string(r + 1) + " has too few columns");
    }
    const int layer = to_int(row[c_layer], "layer", r + 1);
    const auto kind = parse_trace_kind(row[c_kind]);
    const int index = to_int(row[c_index], "word_index", r + 1);
    if (traces.empty() || traces.back().story_id != row[c_story] || traces.back().layer != layer ||
        traces.back().kind != kind || index == 1) {
      TrackTrace t;
      t.story_id = row[c_story];
      t.layer = layer;
      t.kind = kind;
      traces.push_back(std::move(t));
    }
    auto& t = traces.back();
    if (index != static_cast<int>(t.outputs.size()) + 1) {
      throw ValueError(r + 1, "word_index out of sequence on row " + std::to_string(r + 1));
    }
    float raw = 0.0f;
    try {
      raw = std::stof(row[c_raw]);
    } catch (const std::exception&) {
      throw ValueError(r + 1, "bad raw output on row " + std::to_string(r + 1));
    }
    const int sentence = to_int(row[c_sentence], "sentence", r + 1);
    t.outputs.push_back(raw);
    t.word_sentence_index.push_back(sentence);
    if (c_word) t.words.push_back(row[*c_word]);
    if (!row[c_label].empty()) {
      const int label = to_int(row[c_label], "label", r + 1);
      if (sentence >= 1) {
        if (t.sentence_labels.size() < static_cast<std::size_t>(sentence)) {
          t.sentence_labels.resize(static_cast<std::size_t>(sentence), 0);
        }
        t.sentence_labels[static_cast<std::size_t>(sentence - 1)] = label;
      }
    }
  }
  return traces;
}

void write_aggregate_csv(const std::filesystem::path& path, const AggregateTrace& agg, int window) {
  std::vector<float> mean_f(agg.mean.begin(), agg.mean.end());
  const auto smoothed = smooth(mean_f, window);
  std::ostringstream out;
  write_csv_row(out, {"position", "sentence", "mean", "smoothed", "count", "label"});
  for (std::size_t i = 0; i < agg.mean.size(); ++i) {
    const int sentence = agg.sentence[i];
    std::string label;
    if (sentence >= 1 && static_cast<std::size_t>(sentence) <= agg.sentence_labels.size()) {
      label = std::to_string(agg.sentence_labels[static_cast<std::size_t>(sentence - 1)]);
    }
    write_csv_row(out, {std::to_string(i + 1), std::to_string(sentence), format_number(agg.mean[i]),
                        format_number(smoothed[i]), std::to_string(agg.count[i]), label});
  }
  write_text_file(path, out.str());
}

void write_kde_csv(const std::filesystem::path& path, const SegmentKDE& kde) {
  std::ostringstream out;
  write_csv_row(out, {"layer", "segment", "n", "bandwidth", "x", "density"});
  for (const auto& d : kde.segments) {
    const auto common = std::vector<std::string>{std::to_string(kde.layer), std::string(to_string(d.segment)),
                                                 std::to_string(d.n), format_number(d.bandwidth)};
    if (d.point_mass) {
      auto row = common;
      row.push_back(format_number(*d.point_mass));
      row.push_back("inf");
      write_csv_row(out, row);
      continue;
    }
    for (std::size_t g = 0; g < d.density.size(); ++g) {
      auto row = common;
      row.push_back(format_number(kde.grid[g]));
      row.push_back(format_number(d.density[g]));
      write_csv_row(out, row);
    }
  }
  write_text_file(path, out.str());
}

}  // namespace cprobe::storytrack
