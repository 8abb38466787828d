#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lcbm/llm_client.hpp"

namespace lcbm {

struct Concept {
  std::size_t id = 0;
  std::string text;  // "<attribute> <part>"
  std::optional<std::string> part;
  std::optional<std::string> attribute;

  bool operator==(const Concept&) const = default;
};

// The bottleneck vocabulary plus which classes each concept is aligned to.
class ConceptSet {
 public:
  using Alignment = std::map<std::string, std::set<std::size_t>>;

  ConceptSet() = default;
  // Validates ids (must be 0..K-1 in order), texts and alignment references.
  ConceptSet(std::vector<Concept> concepts, Alignment alignment = {});

  std::size_t size() const { return concepts_.size(); }
  const std::vector<Concept>& concepts() const { return concepts_; }
  const Concept& at(std::size_t id) const { return concepts_.at(id); }
  const Alignment& class_alignment() const { return alignment_; }

  // Lookup by normalized text; nullopt if absent.
  std::optional<std::size_t> find(const std::string& text) const;
  // Concept ids aligned to `label` (empty when the class is unknown).
  std::set<std::size_t> aligned_to(const std::string& label) const;
  bool all_aligned() const;

  bool operator==(const ConceptSet& o) const {
    return concepts_ == o.concepts_ && alignment_ == o.alignment_;
  }

 private:
  std::vector<Concept> concepts_;
  Alignment alignment_;
};

// Lower-case, trim, collapse inner whitespace and strip surrounding quotes,
// brackets and trailing punctuation.
std::string normalize_concept_text(const std::string& text);

// Splits a free-form list answer (bullets, numbered lines or a comma list)
// into items. Throws ParseError carrying the raw text when nothing usable is
// found.
std::vector<std::string> parse_list_response(const std::string& response);

// Prompt flavor for one dataset. Placeholders: {part}, {class}, {concepts},
// {category}. An attribute query is issued once per combination of the
// {part}/{class} placeholders it mentions; the alignment prompt likewise.
struct PromptTemplates {
  std::string name;
  std::string category;  // "bird", "animal", "car", "lesion", ...
  std::vector<std::string> parts;
  std::vector<std::string> attribute_queries;
  std::string alignment;
  std::string presence;  // MLLM presence template, {concept list}, {category}

  static PromptTemplates from_json(const nlohmann::json& j);
  static PromptTemplates load(const std::filesystem::path& path);
};

std::string fill_template(std::string tmpl,
                          const std::map<std::string, std::string>& values);

struct GenerationOptions {
  RetryPolicy retry{};
  std::size_t max_in_flight = 1;
};

// Everything the pipeline wants an operator to see afterwards.
struct GenerationLog {
  std::shared_ptr<Transcript> transcript = std::make_shared<Transcript>();
  std::vector<std::string> warnings;
};

// Raised when the LLM keeps failing; carries the transcript so far.
class GenerationError : public Error {
 public:
  GenerationError(const std::string& what, std::shared_ptr<Transcript> t)
      : Error(what, ExitCode::kOracleTransport), transcript_(std::move(t)) {}
  const std::shared_ptr<Transcript>& transcript() const { return transcript_; }

 private:
  std::shared_ptr<Transcript> transcript_;
};

// Attribute queries, composition into "<attribute> <part>" concepts,
// case-insensitive de-duplication, then class alignment. The result is not
// pruned.
ConceptSet generate_concepts(const std::vector<std::string>& parts,
                             const std::vector<std::string>& classes,
                             LLMClient& client, const PromptTemplates& templates,
                             GenerationLog* log = nullptr,
                             const GenerationOptions& options = {});

// Replaces the alignment of `set` with the classes' answers. Unknown concept
// names in a response are skipped and reported through `warnings`.
ConceptSet align_concepts_to_classes(const ConceptSet& set,
                                     const std::vector<std::string>& classes,
                                     LLMClient& client,
                                     const std::string& alignment_template,
                                     std::vector<std::string>* warnings = nullptr,
                                     std::size_t max_in_flight = 1);

// Keeps concepts aligned to at least one class and re-indexes densely.
ConceptSet prune_unaligned(const ConceptSet& set);

// Concept file: one JSON record per line {id, text, part, attribute}.
// Alignment file: one JSON record per line {class, ids}.
void save_concepts(const ConceptSet& set, const std::filesystem::path& concepts,
                   const std::filesystem::path& alignment);
ConceptSet load_concepts(const std::filesystem::path& concepts,
                         const std::filesystem::path& alignment = {});

}  // namespace lcbm
