#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cprobe::agreement {

// Two-category kappas. Both throw DimensionError on ragged input and
// UndefinedKappaError when chance agreement is 1 but observed agreement is
// not; perfect agreement on a constant column reports 1.0.
double cohen_kappa(const std::vector<int>& a, const std::vector<int>& b);
// table[i][r] is rater r's 0/1 label for example i.
double fleiss_kappa(const std::vector<std::vector<int>>& table);

struct AnnotationTable {
  std::vector<std::string> example_ids;
  std::vector<std::string> raters;
  std::vector<std::vector<int>> labels;       // examples x raters
  std::vector<std::vector<int>> borderline;   // examples x raters, 0/1

  void validate() const;
  std::vector<int> rater_column(std::size_t rater) const;
};

enum class ConfidenceRule { unanimous, near_unanimous_clean, dissenter_borderline };

struct ConfidentLabel {
  std::string example_id;
  std::size_t row = 0;
  int label = 0;
  ConfidenceRule rule = ConfidenceRule::unanimous;
};

// Keeps an example when all raters agree with fewer than two borderline
// flags; or when exactly one rater dissents from a strict majority and
// either nobody flagged borderline or only the dissenter did.
std::vector<ConfidentLabel> confident_filter(const AnnotationTable& table);

// Pairwise Cohen kappa between raters; NaN where undefined.
std::vector<std::vector<double>> kappa_matrix(const AnnotationTable& table);

// Long format: example_id,rater_id,label,borderline. Every example must be
// rated by every rater exactly once.
AnnotationTable read_annotations_csv(const std::filesystem::path& path);

// example_id,label,rule
void write_confident_csv(const std::filesystem::path& path, const std::vector<ConfidentLabel>& kept);
// rater,<rater ids...>
void write_kappa_matrix_csv(const std::filesystem::path& path,
                            const std::vector<std::string>& raters,
                            const std::vector<std::vector<double>>& matrix);

}  // namespace cprobe::agreement
