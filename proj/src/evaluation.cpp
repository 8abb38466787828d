#include "lcbm/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <regex>
#include <thread>

#include "lcbm/errors.hpp"
#include "lcbm/parallel.hpp"

namespace lcbm {
namespace {

std::string lower(std::string s) {
  for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::optional<double> mean(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::size_t argmax(const Tensor& t) {
  return static_cast<std::size_t>(std::max_element(t.data().begin(), t.data().end()) -
                                  t.data().begin());
}

}  // namespace

void AnnotationStore::add(PointRecord p) { points_.push_back(std::move(p)); }

void AnnotationStore::add(BoxRecord b) {
  if (b.box.x1 >= b.box.x2 || b.box.y1 >= b.box.y2)
    throw ParseError("box for " + b.image_id + "/" + b.key + " needs x1 < x2 and y1 < y2");
  boxes_.push_back(std::move(b));
}

std::vector<PointRecord> AnnotationStore::points(const std::string& image_id) const {
  std::vector<PointRecord> out;
  for (const auto& p : points_)
    if (p.image_id == image_id) out.push_back(p);
  return out;
}

std::vector<BoxRecord> AnnotationStore::boxes(const std::string& image_id) const {
  std::vector<BoxRecord> out;
  for (const auto& b : boxes_)
    if (b.image_id == image_id) out.push_back(b);
  return out;
}

std::optional<PixelBox> AnnotationStore::box(const std::string& image_id,
                                             const std::string& key) const {
  const std::string k = lower(key);
  for (const auto& b : boxes_)
    if (b.image_id == image_id && lower(b.key) == k) return b.box;
  return std::nullopt;
}

std::optional<PointRecord> AnnotationStore::point(const std::string& image_id,
                                                  const std::string& part) const {
  const std::string k = lower(part);
  for (const auto& p : points_)
    if (p.image_id == image_id && lower(p.part) == k) return p;
  return std::nullopt;
}

void AnnotationStore::check_bounds(const std::string& image_id, std::size_t width,
                                   std::size_t height) const {
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  for (const auto& p : points_)
    if (p.image_id == image_id && !(p.x >= 0 && p.y >= 0 && p.x < w && p.y < h))
      throw PreconditionError("annotation point " + image_id + "/" + p.part +
                              " lies outside the image");
  for (const auto& b : boxes_)
    if (b.image_id == image_id &&
        (b.box.x1 < 0 || b.box.y1 < 0 || b.box.x2 > static_cast<int>(width) ||
         b.box.y2 > static_cast<int>(height)))
      throw PreconditionError("annotation box " + image_id + "/" + b.key +
                              " lies outside the image");
}

AnnotationStore AnnotationStore::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotations " + path.string());
  AnnotationStore store;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::string type = j.at("type");
      if (type == "point") {
        store.add(PointRecord{j.at("image_id"), j.at("part"), j.at("x"), j.at("y")});
      } else if (type == "box") {
        store.add(BoxRecord{j.at("image_id"), j.at("key"),
                            {j.at("x1"), j.at("y1"), j.at("x2"), j.at("y2")}});
      } else {
        throw ParseError("unknown annotation type '" + type + "'", n, line);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), n, line);
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": " + e.what(), n, line);
    }
  }
  return store;
}

void AnnotationStore::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write annotations " + path.string());
  for (const auto& p : points_)
    out << nlohmann::json{{"type", "point"}, {"image_id", p.image_id}, {"part", p.part},
                          {"x", p.x}, {"y", p.y}}.dump()
        << "\n";
  for (const auto& b : boxes_)
    out << nlohmann::json{{"type", "box"}, {"image_id", b.image_id}, {"key", b.key},
                          {"x1", b.box.x1}, {"y1", b.box.y1}, {"x2", b.box.x2},
                          {"y2", b.box.y2}}.dump()
        << "\n";
}

std::string to_string(Presence p) {
  switch (p) {
    case Presence::kYes: return "yes";
    case Presence::kNo: return "no";
    case Presence::kUnknown: break;
  }
  return "unknown";
}

GroundTruthPresenceOracle::GroundTruthPresenceOracle(
    std::map<std::string, std::set<std::string>> present) {
  for (auto& [id, texts] : present)
    for (const auto& t : texts) present_[id].insert(normalize_concept_text(t));
}

std::vector<Presence> GroundTruthPresenceOracle::query(const std::string& image_id, const Image&,
                                                       const std::vector<std::string>& concepts) {
  std::vector<Presence> out;
  const auto it = present_.find(image_id);
  for (const auto& c : concepts)
    out.push_back(it != present_.end() && it->second.count(normalize_concept_text(c))
                      ? Presence::kYes
                      : Presence::kNo);
  return out;
}

std::optional<std::vector<Presence>> parse_presence_answer(const std::string& reply,
                                                          std::size_t expected) {
  static const std::regex group("<([^<>]*)>");
  std::string last;
  bool found = false;
  for (auto it = std::sregex_iterator(reply.begin(), reply.end(), group);
       it != std::sregex_iterator(); ++it) {
    last = (*it)[1];
    found = true;
  }
  if (!found) return std::nullopt;
  std::vector<Presence> out;
  std::size_t start = 0;
  while (true) {
    const auto slash = last.find('/', start);
    const std::string tok = lower(trim(last.substr(start, slash - start)));
    if (tok == "yes") out.push_back(Presence::kYes);
    else if (tok == "no") out.push_back(Presence::kNo);
    else return std::nullopt;
    if (slash == std::string::npos) break;
    start = slash + 1;
  }
  if (out.size() != expected) return std::nullopt;
  return out;
}

std::string format_concept_list(const std::vector<std::string>& concepts) {
  std::string s;
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    if (i) s += ", ";
    s += "'" + concepts[i] + "'";
  }
  return s;
}

MllmPresenceOracle::MllmPresenceOracle(MultimodalClient& client, std::string presence_template,
                                       std::string category,
                                       std::shared_ptr<Transcript> transcript, RetryPolicy retry)
    : client_(client),
      template_(std::move(presence_template)),
      category_(std::move(category)),
      transcript_(std::move(transcript)),
      retry_(retry) {
  if (template_.find("{concept list}") == std::string::npos)
    throw ConfigError("presence template lacks a {concept list} placeholder");
}

std::string MllmPresenceOracle::prompt_for(const std::vector<std::string>& concepts) const {
  return fill_template(template_,
                       {{"concept list", format_concept_list(concepts)}, {"category", category_}});
}

std::string MllmPresenceOracle::send(const std::string& prompt, const Image& image) {
  auto delay = retry_.base_delay;
  for (int attempt = 1;; ++attempt) {
    try {
      std::string reply = client_.send(prompt, image);
      if (transcript_) transcript_->add({prompt, reply, {}, attempt});
      return reply;
    } catch (const OracleError& e) {
      if (transcript_) transcript_->add({prompt, {}, e.what(), attempt});
      if (attempt >= retry_.attempts) throw;
    }
    if (delay.count() > 0) std::this_thread::sleep_for(delay);
    delay *= 2;
  }
}

std::vector<Presence> MllmPresenceOracle::query(const std::string&, const Image& image,
                                                const std::vector<std::string>& concepts) {
  if (concepts.empty()) return {};
  const std::string prompt = prompt_for(concepts);
  for (int attempt = 0; attempt < 2; ++attempt)
    if (auto parsed = parse_presence_answer(send(prompt, image), concepts.size())) return *parsed;
  return std::vector<Presence>(concepts.size(), Presence::kUnknown);
}

nlohmann::json EvalReport::summary() const {
  return {{"settings", settings},
          {"images", images},
          {"metrics",
           {{"accuracy", opt(accuracy)},
            {"precision", opt(precision)},
            {"recall", opt(recall)},
            {"inclusion", opt(inclusion)},
            {"miou", opt(miou)},
            {"rep", opt(rep)},
            {"deletion_ratio", opt(deletion_ratio)},
            {"deletion_difference", opt(deletion_difference)},
            {"deletion_ratio_by_image", opt(deletion_ratio_by_image)},
            {"deletion_difference_by_image", opt(deletion_difference_by_image)},
            {"patch_proto_ratio", opt(patch_proto_ratio)}}},
          {"match_rank_histogram", match_rank_histogram},
          {"notices", notices},
          {"skipped", skipped}};
}

void EvalReport::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "summary.json");
    if (!out) throw IoError("cannot write " + (dir / "summary.json").string());
    out << summary().dump(2) << "\n";
  }
  std::ofstream out(dir / "details.jsonl");
  if (!out) throw IoError("cannot write " + (dir / "details.jsonl").string());
  for (const auto& d : details) out << d.dump() << "\n";
}

namespace {

struct LocalizationRow {
  std::optional<double> inclusion, iou, rep, ratio, difference;
};

struct ImageResult {
  nlohmann::json detail;
  std::vector<nlohmann::json> skipped;
  bool correct = false;
  std::optional<double> precision, recall;
  std::vector<LocalizationRow> rows;
  std::vector<std::optional<std::size_t>> ranks;
  PatchPrototypeResult patch;
};

ImageResult evaluate_one(const EvalInputs& in, const EvalItem& item, const EvalOptions& o) {
  const LcbmModel& model = *in.model;
  const auto& concepts = in.concepts->concepts();
  ImageResult r;
  auto& d = r.detail;
  d["image_id"] = item.id;
  d["label"] = item.label;

  const auto [lc_var, lp_var] = model.predict(item.image);
  const Tensor& l_c = lc_var.value();
  const std::size_t pred = argmax(lp_var.value());
  r.correct = pred == item.label;
  d["predicted"] = pred;
  const std::size_t cls = o.use_true_class ? item.label : pred;
  const auto contrib = concept_contributions(l_c, model.class_weight().value(), cls);
  const auto selected =
      o.score_only ? select_top_by_score(l_c, o.k) : select_top_concepts(contrib, l_c, o.k);
  nlohmann::json sel = nlohmann::json::array();
  for (const std::size_t k : selected)
    sel.push_back({{"concept_id", k}, {"text", concepts[k].text}, {"score", l_c[k]},
                   {"contribution", contrib[k]}});
  d["selected"] = sel;

  // Presence of the selected concepts plus the label's aligned concepts.
  std::map<std::size_t, Presence> presence;
  bool presence_ok = in.oracle == nullptr;
  if (in.oracle) {
    std::vector<std::size_t> ask = selected;
    std::set<std::size_t> aligned;
    if (item.label < in.class_names.size())
      aligned = in.concepts->aligned_to(in.class_names[item.label]);
    for (const std::size_t k : aligned)
      if (std::find(ask.begin(), ask.end(), k) == ask.end()) ask.push_back(k);
    std::vector<std::string> texts;
    for (const std::size_t k : ask) texts.push_back(concepts[k].text);
    try {
      const auto answers = in.oracle->query(item.id, item.image, texts);
      if (answers.size() != ask.size())
        throw OracleError("presence oracle returned " + std::to_string(answers.size()) +
                          " answers for " + std::to_string(ask.size()) + " concepts");
      for (std::size_t i = 0; i < ask.size(); ++i) presence[ask[i]] = answers[i];
      presence_ok = true;
      nlohmann::json pj = nlohmann::json::object();
      for (const std::size_t k : ask) pj[concepts[k].text] = to_string(presence[k]);
      d["presence"] = pj;

      std::size_t yes = 0, judged = 0, unknown = 0;
      for (const std::size_t k : selected) {
        if (presence[k] == Presence::kUnknown) {
          ++unknown;
          continue;
        }
        ++judged;
        yes += presence[k] == Presence::kYes;
      }
      if (unknown) d["flags"].push_back("presence unknown for " + std::to_string(unknown) + " concepts");
      if (judged) r.precision = static_cast<double>(yes) / static_cast<double>(judged);
      d["precision"] = opt(r.precision);

      std::size_t gt = 0, hit = 0;
      for (const std::size_t k : aligned) {
        if (presence[k] != Presence::kYes) continue;
        ++gt;
        hit += std::find(selected.begin(), selected.end(), k) != selected.end();
      }
      if (gt) r.recall = static_cast<double>(hit) / static_cast<double>(gt);
      else d["flags"].push_back("no ground-truth concepts for recall");
      d["recall"] = opt(r.recall);
    } catch (const OracleError& e) {
      r.skipped.push_back({{"image_id", item.id}, {"stage", "presence"}, {"reason", e.what()}});
    }
  }

  const std::size_t H = model.config().grid_h, W = model.config().grid_w;
  const std::size_t ih = item.image.height(), iw = item.image.width();
  if (in.annotations && presence_ok) {
    in.annotations->check_bounds(item.id, iw, ih);
    const ag::Var F = extract_features(item.image, model.backbone());
    const Tensor M0 = prototype_similarity(F, model.prototypes()).value();

    std::vector<std::size_t> present;
    for (const std::size_t k : selected)
      if (!in.oracle || presence[k] == Presence::kYes) present.push_back(k);

    nlohmann::json loc = nlohmann::json::array();
    std::set<std::size_t> ranked;
    nlohmann::json ranks = nlohmann::json::array();
    auto add_rank = [&](std::size_t k, const PixelBox& box) {
      if (!ranked.insert(k).second) return;
      const auto rank = match_rank(M0, k, box, H, W, ih, iw);
      r.ranks.push_back(rank);
      ranks.push_back({{"concept_id", k},
                       {"rank", rank ? nlohmann::json(*rank) : nlohmann::json(nullptr)}});
    };

    for (const std::size_t k : present) {
      const auto& c = concepts[k];
      const std::string part = c.part.value_or(c.text);
      auto point = in.annotations->point(item.id, part);
      if (!point) point = in.annotations->point(item.id, c.text);
      auto box = in.annotations->box(item.id, c.text);
      if (!box) box = in.annotations->box(item.id, part);
      if (!point && !box) continue;
      const SaliencyMask s = gradcam_map(model, item.image, k);
      LocalizationRow row;
      nlohmann::json rj{{"concept_id", k}, {"text", c.text}, {"empty_map", s.all_zero}};
      if (point) {
        row.inclusion = inclusion(s.mask, point->x, point->y) ? 1.0 : 0.0;
        rj["inclusion"] = *row.inclusion;
      }
      if (box) {
        const auto io = iou(s.mask, *box);
        row.iou = io.value;
        row.rep = lcbm::rep(s.mask, *box);
        const auto del = deletion(model, item.image, *box, k);
        row.ratio = del.ratio;
        row.difference = del.difference;
        rj["iou"] = io.value;
        if (io.flagged) rj["iou_flag"] = "empty mask and box";
        rj["rep"] = *row.rep;
        rj["deletion"] = {{"before", del.before},
                          {"after", del.after},
                          {"ratio", opt(del.ratio)},
                          {"difference", del.difference}};
        add_rank(k, *box);
      }
      if (o.overlay_dir) {
        std::filesystem::create_directories(*o.overlay_dir);
        write_png(heatmap_overlay(item.image, s.map, s.mask.bits),
                  *o.overlay_dir / (item.id + "_c" + std::to_string(k) + ".png"));
      }
      r.rows.push_back(row);
      loc.push_back(rj);
    }
    // Concept-level boxes are rank-evaluated whether or not the concept was selected.
    for (const auto& b : in.annotations->boxes(item.id))
      if (const auto k = in.concepts->find(b.key)) add_rank(*k, b.box);
    d["localization"] = loc;
    d["match_ranks"] = ranks;

    std::vector<PartPoint> pts;
    for (const auto& p : in.annotations->points(item.id)) pts.push_back({p.part, p.x, p.y});
    if (!pts.empty()) {
      std::vector<std::string> texts;
      for (const auto& c : concepts) texts.push_back(c.text);
      r.patch = patch_to_prototype(F.value(), model.prototypes().value(), pts, texts, H, W, ih,
                                   iw, o.patch_prototypes);
      d["patch_proto"] = {{"points", r.patch.points}, {"matches", r.patch.matches}};
    }
  } else if (in.annotations) {
    r.skipped.push_back(
        {{"image_id", item.id}, {"stage", "localization"}, {"reason", "presence unavailable"}});
  }
  return r;
}

}  // namespace

EvalReport evaluate(const EvalInputs& in, const std::vector<EvalItem>& items,
                    const EvalOptions& o) {
  if (!in.model || !in.concepts) throw PreconditionError("evaluate: model and concepts required");
  if (in.concepts->size() != in.model->config().num_concepts)
    throw PreconditionError("evaluate: concept set has " + std::to_string(in.concepts->size()) +
                            " concepts, model expects " +
                            std::to_string(in.model->config().num_concepts));
  if (items.empty()) throw PreconditionError("evaluate: no images");

  EvalReport rep;
  rep.images = items.size();
  rep.settings = {{"k", o.k},
                  {"ranking", o.score_only ? "concept score" : "contribution"},
                  {"contribution_class", o.use_true_class ? "label" : "predicted"},
                  {"presence_oracle", in.oracle ? in.oracle->name() : "none"},
                  {"saliency_threshold", 0.5},
                  {"cell_to_image", "cell center"},
                  {"patch_prototypes", o.patch_prototypes}};
  if (!in.oracle)
    rep.notices.push_back("no presence oracle: precision and recall omitted; localization uses all selected concepts");
  if (!in.annotations || in.annotations->empty())
    rep.notices.push_back("no annotations: localization, deletion, match-rank and patch-to-prototype omitted");

  const auto results = parallel_map(items.size(), o.max_in_flight,
                                    [&](std::size_t i) { return evaluate_one(in, items[i], o); });

  const std::size_t HW = in.model->config().cells();
  if (in.annotations && !in.annotations->empty()) rep.match_rank_histogram.assign(HW + 1, 0);
  std::vector<double> acc, prec, rec, inc, ious, reps, ratios, diffs, ratio_img, diff_img;
  PatchPrototypeResult patch;
  for (const auto& r : results) {
    acc.push_back(r.correct ? 1.0 : 0.0);
    if (r.precision) prec.push_back(*r.precision);
    if (r.recall) rec.push_back(*r.recall);
    std::vector<double> ri, di;
    for (const auto& row : r.rows) {
      if (row.inclusion) inc.push_back(*row.inclusion);
      if (row.iou) ious.push_back(*row.iou);
      if (row.rep) reps.push_back(*row.rep);
      if (row.ratio) ratios.push_back(*row.ratio), ri.push_back(*row.ratio);
      if (row.difference) diffs.push_back(*row.difference), di.push_back(*row.difference);
    }
    if (auto m = mean(ri)) ratio_img.push_back(*m);
    if (auto m = mean(di)) diff_img.push_back(*m);
    for (const auto& rank : r.ranks) ++rep.match_rank_histogram[rank ? *rank - 1 : HW];
    patch.points += r.patch.points;
    patch.matches += r.patch.matches;
    rep.details.push_back(r.detail);
    for (const auto& s : r.skipped) rep.skipped.push_back(s);
  }
  rep.accuracy = mean(acc);
  rep.precision = mean(prec);
  rep.recall = mean(rec);
  rep.inclusion = mean(inc);
  rep.miou = mean(ious);
  rep.rep = mean(reps);
  rep.deletion_ratio = mean(ratios);
  rep.deletion_difference = mean(diffs);
  rep.deletion_ratio_by_image = mean(ratio_img);
  rep.deletion_difference_by_image = mean(diff_img);
  if (patch.points) rep.patch_proto_ratio = patch.ratio();
  return rep;
}

}  // namespace lcbm
