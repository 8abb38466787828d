#include "lcbm/synthetic.hpp"

#include <algorithm>

#include "lcbm/errors.hpp"
#include "lcbm/patch_embedding.hpp"
#include "lcbm/rng.hpp"

namespace lcbm {
namespace {

struct Rgb {
  double r, g, b;
};

Rgb color_of(const std::string& name) {
  for (const auto& c : PaletteOracle::palette())
    if (c.name == name) return {c.r, c.g, c.b};
  throw PreconditionError("no palette color named " + name);
}

void fill(Image& img, const PixelBox& box, Rgb c) {
  for (int y = box.y1; y < box.y2; ++y)
    for (int x = box.x1; x < box.x2; ++x) {
      img.at(0, y, x) = c.r;
      img.at(1, y, x) = c.g;
      img.at(2, y, x) = c.b;
    }
}

bool overlaps(const PixelBox& a, const PixelBox& b) {
  return a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2;
}

}  // namespace

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"red", "blue", "yellow", "green", "purple", "orange"};
  return names;
}

std::vector<std::string> synthetic_concepts(std::size_t classes) {
  std::vector<std::string> out;
  for (std::size_t c = 0; c < classes; ++c) out.push_back(synthetic_class_names()[c] + " square");
  out.push_back("gray background");
  out.push_back("white spot");
  return out;
}

std::vector<SyntheticItem> generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 1 || spec.classes > synthetic_class_names().size())
    throw PreconditionError("synthetic data supports 1 to " +
                            std::to_string(synthetic_class_names().size()) + " classes");
  if (spec.image_size < 12) throw PreconditionError("synthetic images must be at least 12 pixels");
  Rng rng(spec.seed);
  const int S = static_cast<int>(spec.image_size);
  const Rgb gray = color_of("gray"), white = color_of("white");
  std::vector<SyntheticItem> items;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const Rgb color = color_of(synthetic_class_names()[c]);
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      SyntheticItem item;
      item.id = synthetic_class_names()[c] + "_" + std::to_string(i);
      item.label = c;
      item.image = Image(3, spec.image_size, spec.image_size);
      fill(item.image, {0, 0, S, S}, gray);
      const int side = S / 3 + static_cast<int>(rng.below(static_cast<std::size_t>(S / 6 + 1)));
      const int x = static_cast<int>(rng.below(static_cast<std::size_t>(S - side + 1)));
      const int y = static_cast<int>(rng.below(static_cast<std::size_t>(S - side + 1)));
      item.object = {x, y, x + side, y + side};
      fill(item.image, item.object, color);
      item.present = {synthetic_class_names()[c] + " square", "gray background"};
      if (i % 2 == 1) {
        const int s = std::max(2, S / 8);
        for (int attempt = 0; attempt < 50; ++attempt) {
          const int sx = static_cast<int>(rng.below(static_cast<std::size_t>(S - s + 1)));
          const int sy = static_cast<int>(rng.below(static_cast<std::size_t>(S - s + 1)));
          const PixelBox spot{sx, sy, sx + s, sy + s};
          if (!overlaps(spot, item.object)) {
            item.spot = spot;
            fill(item.image, spot, white);
            item.present.push_back("white spot");
            break;
          }
        }
      }
      for (auto& v : item.image.mutable_tensor().data())
        v = std::clamp(v + spec.noise * rng.normal(), 0.0, 1.0);
      items.push_back(std::move(item));
    }
  }
  return items;
}

ConceptSet synthetic_concept_set(std::size_t classes) {
  std::vector<Concept> concepts;
  for (const auto& text : synthetic_concepts(classes)) {
    const auto sp = text.find(' ');
    concepts.push_back({concepts.size(), text, text.substr(sp + 1), text.substr(0, sp)});
  }
  ConceptSet::Alignment align;
  for (std::size_t c = 0; c < classes; ++c) align[synthetic_class_names()[c]] = {c, classes};
  return ConceptSet(concepts, align);
}

AnnotationStore annotate_synthetic(const std::vector<SyntheticItem>& items) {
  AnnotationStore store;
  auto center = [](const PixelBox& b) {
    return std::pair{(b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0};
  };
  for (const auto& it : items) {
    const auto [ox, oy] = center(it.object);
    store.add(PointRecord{it.id, "square", ox, oy});
    store.add(BoxRecord{it.id, synthetic_class_names()[it.label] + " square", it.object});
    if (it.spot) {
      const auto [sx, sy] = center(*it.spot);
      store.add(PointRecord{it.id, "spot", sx, sy});
      store.add(BoxRecord{it.id, "white spot", *it.spot});
    }
  }
  return store;
}

std::map<std::string, std::set<std::string>> synthetic_presence(
    const std::vector<SyntheticItem>& items) {
  std::map<std::string, std::set<std::string>> out;
  for (const auto& it : items) out[it.id] = {it.present.begin(), it.present.end()};
  return out;
}

}  // namespace lcbm
