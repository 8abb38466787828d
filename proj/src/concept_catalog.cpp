#include "lcbm/concept_catalog.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "lcbm/parallel.hpp"

namespace lcbm {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool is_edge_junk(char c) {
  return std::isspace(static_cast<unsigned char>(c)) ||
         std::string_view("\"'`[](){}<>.,;:!?*").find(c) != std::string_view::npos;
}

// Strips list markup from one item but keeps its case.
std::string clean_item(std::string s) {
  std::string out;
  for (char c : s)
    if (c != '<' && c != '>' && c != '*' && c != '`') out.push_back(c);
  std::size_t b = 0, e = out.size();
  while (b < e && is_edge_junk(out[b])) ++b;
  while (e > b && is_edge_junk(out[e - 1])) --e;
  std::string collapsed;
  bool space = false;
  for (std::size_t i = b; i < e; ++i) {
    if (std::isspace(static_cast<unsigned char>(out[i]))) {
      space = true;
      continue;
    }
    if (space && !collapsed.empty()) collapsed.push_back(' ');
    space = false;
    collapsed.push_back(out[i]);
  }
  return collapsed;
}

// Returns the text after a bullet or "12." / "12)" marker, or nullopt.
std::optional<std::string> strip_bullet(const std::string& line) {
  if (line.empty()) return std::nullopt;
  if (line.rfind("•", 0) == 0) return trim(line.substr(std::string("•").size()));
  if (line[0] == '-' || line[0] == '*' || line[0] == '+') {
    if (line.size() == 1 || std::isspace(static_cast<unsigned char>(line[1])))
      return trim(line.substr(1));
  }
  std::size_t i = 0;
  while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
  if (i > 0 && i < line.size() && (line[i] == '.' || line[i] == ')'))
    return trim(line.substr(i + 1));
  return std::nullopt;
}

bool has_placeholder(const std::string& tmpl, const char* name) {
  return tmpl.find(std::string("{") + name + "}") != std::string::npos;
}

bool ends_with_word(const std::string& text, const std::string& word) {
  const std::string t = lower(text), w = lower(word);
  if (t == w) return true;
  return t.size() > w.size() && t.compare(t.size() - w.size(), w.size(), w) == 0 &&
         t[t.size() - w.size() - 1] == ' ';
}

std::string join(const std::vector<std::string>& items, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

}  // namespace

std::string normalize_concept_text(const std::string& text) {
  return lower(clean_item(text));
}

ConceptSet::ConceptSet(std::vector<Concept> concepts, Alignment alignment)
    : concepts_(std::move(concepts)), alignment_(std::move(alignment)) {
  for (std::size_t i = 0; i < concepts_.size(); ++i) {
    const auto& c = concepts_[i];
    if (c.id != i)
      throw PreconditionError("concept ids must be dense and ordered; position " +
                              std::to_string(i) + " has id " + std::to_string(c.id));
    if (trim(c.text).empty())
      throw PreconditionError("concept " + std::to_string(i) + " has empty text");
    if (c.part && c.text.find(*c.part) == std::string::npos)
      throw PreconditionError("concept '" + c.text + "': part '" + *c.part +
                              "' is not part of its text");
  }
  for (const auto& [label, ids] : alignment_)
    for (auto id : ids)
      if (id >= concepts_.size())
        throw PreconditionError("class '" + label + "' aligned to unknown concept id " +
                                std::to_string(id));
}

std::optional<std::size_t> ConceptSet::find(const std::string& text) const {
  const std::string key = normalize_concept_text(text);
  for (const auto& c : concepts_)
    if (normalize_concept_text(c.text) == key) return c.id;
  return std::nullopt;
}

std::set<std::size_t> ConceptSet::aligned_to(const std::string& label) const {
  auto it = alignment_.find(label);
  return it == alignment_.end() ? std::set<std::size_t>{} : it->second;
}

bool ConceptSet::all_aligned() const {
  std::vector<bool> seen(concepts_.size(), false);
  for (const auto& [label, ids] : alignment_)
    for (auto id : ids) seen[id] = true;
  return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

std::vector<std::string> parse_list_response(const std::string& response) {
  std::vector<std::string> bullets, plain;
  std::istringstream in(response);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    if (auto body = strip_bullet(line)) {
      // "**Black**: common in seabirds" -> "Black"
      std::string item = *body;
      if (auto colon = item.find(':'); colon != std::string::npos && colon > 0)
        item = item.substr(0, colon);
      bullets.push_back(item);
    } else {
      plain.push_back(line);
    }
  }
  std::vector<std::string> raw_items;
  if (!bullets.empty()) {
    raw_items = bullets;
  } else {
    for (auto l : plain) {
      // "Answer: a, b" -> "a, b"
      if (auto colon = l.rfind(':'); colon != std::string::npos) l = l.substr(colon + 1);
      std::string cur;
      for (char c : l) {
        if (c == ',' || c == ';') {
          raw_items.push_back(cur);
          cur.clear();
        } else {
          cur.push_back(c);
        }
      }
      raw_items.push_back(cur);
    }
  }
  std::vector<std::string> items;
  for (const auto& r : raw_items) {
    std::string item = clean_item(r);
    if (!item.empty() && item != "…" && item != "...") items.push_back(item);
  }
  if (items.empty())
    throw ParseError("could not parse a list from LLM response", 0, response);
  return items;
}

PromptTemplates PromptTemplates::from_json(const nlohmann::json& j) {
  try {
    PromptTemplates t;
    t.name = j.value("name", "");
    t.category = j.value("category", "");
    t.parts = j.value("parts", std::vector<std::string>{});
    t.attribute_queries = j.at("attribute_queries").get<std::vector<std::string>>();
    t.alignment = j.at("alignment").get<std::string>();
    t.presence = j.value("presence", "");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("prompt templates: ") + e.what());
  }
}

PromptTemplates PromptTemplates::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt templates " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("prompt templates " + path.string() + ": " + e.what());
  }
}

std::string fill_template(std::string tmpl,
                          const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) {
    const std::string needle = "{" + key + "}";
    for (std::size_t pos = tmpl.find(needle); pos != std::string::npos;
         pos = tmpl.find(needle, pos + value.size()))
      tmpl.replace(pos, needle.size(), value);
  }
  return tmpl;
}

namespace {

struct Query {
  std::string prompt;
  std::optional<std::string> part;
};

std::vector<std::string> send_all(LLMClient& client,
                                  const std::vector<std::string>& prompts,
                                  std::size_t max_in_flight) {
  return parallel_map(prompts.size(), max_in_flight,
                      [&](std::size_t i) { return client.send(prompts[i]); });
}

}  // namespace

ConceptSet generate_concepts(const std::vector<std::string>& parts,
                             const std::vector<std::string>& classes,
                             LLMClient& client, const PromptTemplates& templates,
                             GenerationLog* log, const GenerationOptions& options) {
  if (parts.empty()) throw PreconditionError("generate_concepts: no parts given");
  if (classes.empty()) throw PreconditionError("generate_concepts: no classes given");
  if (templates.attribute_queries.empty() || templates.alignment.empty())
    throw PreconditionError(
        "generate_concepts: templates need attribute queries and an alignment prompt");

  GenerationLog local_log;
  GenerationLog& glog = log ? *log : local_log;
  RetryingLLMClient retrying(client, options.retry, glog.transcript);

  std::vector<Query> queries;
  for (const auto& tmpl : templates.attribute_queries) {
    const bool per_part = has_placeholder(tmpl, "part");
    const bool per_class = has_placeholder(tmpl, "class");
    const std::vector<std::string> no_value{""};
    for (const auto& part : per_part ? parts : no_value)
      for (const auto& cls : per_class ? classes : no_value) {
        Query q;
        q.prompt = fill_template(tmpl, {{"part", part},
                                        {"class", cls},
                                        {"category", templates.category}});
        if (per_part) q.part = part;
        queries.push_back(std::move(q));
      }
  }

  std::vector<std::string> prompts;
  for (const auto& q : queries) prompts.push_back(q.prompt);
  std::vector<std::string> responses;
  try {
    responses = send_all(retrying, prompts, options.max_in_flight);
  } catch (const OracleError& e) {
    throw GenerationError(std::string("concept generation failed: ") + e.what(),
                          glog.transcript);
  }

  std::vector<Concept> concepts;
  std::unordered_map<std::string, std::size_t> by_key;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    for (const auto& item : parse_list_response(responses[qi])) {
      Concept c;
      if (queries[qi].part) {
        const std::string& part = *queries[qi].part;
        if (ends_with_word(item, part)) {
          c.text = item;
          const std::string attr = trim(item.substr(0, item.size() - part.size()));
          if (!attr.empty()) c.attribute = attr;
          // Keep the casing used in the item itself.
          c.part = item.substr(item.size() - part.size());
        } else {
          c.text = item + " " + part;
          c.attribute = item;
          c.part = part;
        }
      } else {
        c.text = item;
        const auto sp = item.rfind(' ');
        if (sp != std::string::npos) {
          c.attribute = item.substr(0, sp);
          c.part = item.substr(sp + 1);
        }
      }
      const std::string key = normalize_concept_text(c.text);
      if (by_key.count(key)) continue;
      c.id = concepts.size();
      by_key.emplace(key, c.id);
      concepts.push_back(std::move(c));
    }
  }
  ConceptSet unaligned(std::move(concepts));
  try {
    return align_concepts_to_classes(unaligned, classes, retrying, templates.alignment,
                                     &glog.warnings, options.max_in_flight);
  } catch (const OracleError& e) {
    throw GenerationError(std::string("concept alignment failed: ") + e.what(),
                          glog.transcript);
  }
}

ConceptSet align_concepts_to_classes(const ConceptSet& set,
                                     const std::vector<std::string>& classes,
                                     LLMClient& client,
                                     const std::string& alignment_template,
                                     std::vector<std::string>* warnings,
                                     std::size_t max_in_flight) {
  if (set.size() == 0)
    throw PreconditionError("align_concepts_to_classes: empty concept set");

  // Concept groups: one per distinct part when the template mentions {part}.
  std::vector<std::pair<std::string, std::vector<std::size_t>>> groups;
  if (has_placeholder(alignment_template, "part")) {
    for (const auto& c : set.concepts()) {
      const std::string part = c.part.value_or("");
      auto it = std::find_if(groups.begin(), groups.end(),
                             [&](const auto& g) { return g.first == part; });
      if (it == groups.end()) {
        groups.push_back({part, {c.id}});
      } else {
        it->second.push_back(c.id);
      }
    }
  } else {
    std::vector<std::size_t> all;
    for (const auto& c : set.concepts()) all.push_back(c.id);
    groups.push_back({"", all});
  }

  struct Job {
    std::string cls;
    std::string part;
    std::string prompt;
  };
  std::vector<Job> jobs;
  for (const auto& cls : classes)
    for (const auto& [part, ids] : groups) {
      std::vector<std::string> texts;
      for (auto id : ids) texts.push_back(set.at(id).text);
      jobs.push_back({cls, part,
                      fill_template(alignment_template, {{"part", part},
                                                         {"class", cls},
                                                         {"concepts", join(texts, ", ")}})});
    }

  std::vector<std::string> prompts;
  for (const auto& j : jobs) prompts.push_back(j.prompt);
  auto responses = send_all(client, prompts, max_in_flight);

  ConceptSet::Alignment alignment;
  for (const auto& cls : classes) alignment[cls];
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    for (const auto& item : parse_list_response(responses[i])) {
      const std::string key = normalize_concept_text(item);
      if (key == "none" || key == "n/a") continue;
      auto id = set.find(item);
      if (!id && !jobs[i].part.empty()) id = set.find(item + " " + jobs[i].part);
      if (id) {
        alignment[jobs[i].cls].insert(*id);
      } else if (warnings) {
        warnings->push_back("class '" + jobs[i].cls + "': unknown concept '" + item +
                            "' skipped");
      }
    }
  }
  return ConceptSet(set.concepts(), std::move(alignment));
}

ConceptSet prune_unaligned(const ConceptSet& set) {
  std::vector<bool> keep(set.size(), false);
  for (const auto& [label, ids] : set.class_alignment())
    for (auto id : ids) keep[id] = true;
  std::vector<std::size_t> remap(set.size(), set.size());
  std::vector<Concept> kept;
  for (const auto& c : set.concepts()) {
    if (!keep[c.id]) continue;
    remap[c.id] = kept.size();
    Concept copy = c;
    copy.id = kept.size();
    kept.push_back(std::move(copy));
  }
  if (kept.empty())
    throw PreconditionError("pruning left an empty bottleneck: no concept is aligned to any class");
  ConceptSet::Alignment alignment;
  for (const auto& [label, ids] : set.class_alignment()) {
    auto& out = alignment[label];
    for (auto id : ids) out.insert(remap[id]);
  }
  return ConceptSet(std::move(kept), std::move(alignment));
}

void save_concepts(const ConceptSet& set, const std::filesystem::path& concepts,
                   const std::filesystem::path& alignment) {
  std::ofstream cout(concepts);
  if (!cout) throw IoError("cannot write " + concepts.string());
  for (const auto& c : set.concepts()) {
    nlohmann::json j{{"id", c.id}, {"text", c.text}};
    j["part"] = c.part ? nlohmann::json(*c.part) : nlohmann::json(nullptr);
    j["attribute"] = c.attribute ? nlohmann::json(*c.attribute) : nlohmann::json(nullptr);
    cout << j.dump() << '\n';
  }
  if (alignment.empty()) return;
  std::ofstream aout(alignment);
  if (!aout) throw IoError("cannot write " + alignment.string());
  for (const auto& [label, ids] : set.class_alignment())
    aout << nlohmann::json{{"class", label}, {"ids", ids}}.dump() << '\n';
}

namespace {

template <typename Fn>
void for_each_record(const std::filesystem::path& path, Fn fn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ": malformed record: " + e.what(), lineno, line);
    }
    try {
      fn(j, lineno);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": bad field: " + e.what(), lineno, line);
    }
  }
}

std::optional<std::string> optional_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<std::string>();
}

}  // namespace

ConceptSet load_concepts(const std::filesystem::path& concepts,
                         const std::filesystem::path& alignment) {
  std::map<std::size_t, Concept> by_id;
  for_each_record(concepts, [&](const nlohmann::json& j, std::size_t lineno) {
    Concept c;
    c.id = j.at("id").get<std::size_t>();
    c.text = j.at("text").get<std::string>();
    c.part = optional_string(j, "part");
    c.attribute = optional_string(j, "attribute");
    if (trim(c.text).empty())
      throw ParseError(concepts.string() + ": empty concept text", lineno);
    if (c.part && c.text.find(*c.part) == std::string::npos)
      throw ParseError(concepts.string() + ": part is not contained in text", lineno);
    if (!by_id.emplace(c.id, c).second)
      throw ParseError(concepts.string() + ": duplicate concept id " +
                           std::to_string(c.id),
                       lineno);
  });
  std::vector<Concept> list;
  for (auto& [id, c] : by_id) {
    if (id != list.size())
      throw ParseError(concepts.string() + ": concept ids are not dense (missing id " +
                       std::to_string(list.size()) + ")");
    list.push_back(std::move(c));
  }
  ConceptSet::Alignment align;
  if (!alignment.empty()) {
    for_each_record(alignment, [&](const nlohmann::json& j, std::size_t lineno) {
      const auto label = j.at("class").get<std::string>();
      auto& ids = align[label];
      for (auto id : j.at("ids").get<std::vector<std::size_t>>()) {
        if (id >= list.size())
          throw ParseError(alignment.string() + ": unknown concept id " +
                               std::to_string(id),
                           lineno);
        ids.insert(id);
      }
    });
  }
  return ConceptSet(std::move(list), std::move(align));
}

}  // namespace lcbm
