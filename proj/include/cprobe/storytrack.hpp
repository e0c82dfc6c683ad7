#pragma once

#include "cprobe/common.hpp"
#include "cprobe/embedstore.hpp"
#include "cprobe/probekit.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cprobe::storytrack {

enum class TraceKind { final_subword, cumulative_mean };

std::string_view to_string(TraceKind kind);
TraceKind parse_trace_kind(std::string_view text);
// final_subword pairs with nth probes, cumulative_mean with mean probes.
RepresentativeKind probe_kind_for(TraceKind kind);

// Maximal runs of non-whitespace characters.
std::vector<std::string> split_words(std::string_view text);

struct TrackTrace {
  std::string story_id;
  int layer = -1;
  TraceKind kind = TraceKind::final_subword;
  std::vector<float> outputs;
  std::vector<int> word_sentence_index;  // 1-based
  std::vector<std::string> words;
  std::vector<int> sentence_labels;  // optional, one per sentence
};

// `tokens` holds the story's token embeddings (num_tokens x d_model).
// Throws AlignmentError when tokens and alignment disagree and ConfigError
// when the probe was trained on the other representative kind.
TrackTrace track(const MatrixF& tokens,
                 const embedstore::TokenAlignment& alignment,
                 const probekit::Probe& probe,
                 TraceKind kind);

// Trailing moving average; the first window-1 entries average what exists.
std::vector<float> smooth(const std::vector<float>& values, int window = 10);

struct AggregateTrace {
  std::vector<double> mean;
  std::vector<int> count;
  std::vector<int> sentence;         // 1-based sentence of each aligned position
  std::vector<int> sentence_start;   // first aligned position of each sentence
  std::vector<int> max_length;       // per sentence
  std::vector<int> sentence_labels;  // from the first trace that carries labels
  std::vector<std::string> rejected;  // story ids with the wrong sentence count
  int n_stories = 0;
};

// Each story's sentence k is left-padded to the longest sentence k across
// stories; pads are excluded from the mean and the count.
AggregateTrace aggregate(const std::vector<TrackTrace>& traces, int num_sentences = 32);

enum class Segment { paragraph1, transition1, paragraph2, transition2, paragraph3 };
inline constexpr std::array<Segment, 5> kSegments = {Segment::paragraph1, Segment::transition1, Segment::paragraph2,
                                                     Segment::transition2, Segment::paragraph3};

std::string_view to_string(Segment segment);
// Sentences 1-10, 11, 12-21, 22, 23-32. RangeError outside 1..32.
Segment segment_of(int sentence);
bool is_transition(Segment segment);

struct SegmentDensity {
  Segment segment = Segment::paragraph1;
  std::size_t n = 0;
  double bandwidth = 0.0;
  std::vector<double> density;      // on SegmentKDE::grid; empty when degenerate
  std::optional<double> point_mass;  // the lone value of a one-point segment
};

struct SegmentKDE {
  int layer = -1;
  std::vector<double> grid;
  std::vector<SegmentDensity> segments;
};

// Silverman: 0.9 * min(sd, IQR / 1.34) * n^(-1/5). When one spread term is
// zero the other is used; when both are zero the result is 0.
double silverman_bandwidth(std::vector<double> values);
double trapezoid(const std::vector<double>& grid, const std::vector<double>& values);

// Gaussian KDE per segment on a uniform grid over [0, 1], normalised so
// each curve integrates to one. The bandwidth never drops below the grid
// step, so a constant sample yields a narrow spike instead of nothing.
SegmentKDE segment_kde(const std::vector<TrackTrace>& traces, int layer, int grid_points = 512);

struct LayerScore {
  int layer = -1;
  double separation = 0.0;
  double transition_above = 0.0;  // fraction of transition words > 0.5
  double paragraph_below = 0.0;   // fraction of paragraph words < 0.5
  std::size_t n_transition = 0;
  std::size_t n_paragraph = 0;
};

LayerScore separation_score(const std::vector<TrackTrace>& traces, int layer);

struct BestLayer {
  int layer = -1;
  std::vector<LayerScore> table;  // ascending layer order
};

// Highest separation wins; ties go to the lower layer.
BestLayer select_best_layer(const std::map<int, std::vector<TrackTrace>>& per_layer);

// word_index,raw,smoothed,sentence,label,story_id,layer,kind,word
void write_trace_csv(const std::filesystem::path& path, const std::vector<TrackTrace>& traces, int window = 10);
std::vector<TrackTrace> read_trace_csv(const std::filesystem::path& path);

// position,sentence,mean,smoothed,count,label
void write_aggregate_csv(const std::filesystem::path& path, const AggregateTrace& agg, int window = 10);
// segment,x,density plus a bandwidth,n,point_mass summary per segment
void write_kde_csv(const std::filesystem::path& path, const SegmentKDE& kde);

}  // namespace cprobe::storytrack
