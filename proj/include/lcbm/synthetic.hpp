#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lcbm/concept_catalog.hpp"
#include "lcbm/evaluation.hpp"
#include "lcbm/image.hpp"

namespace lcbm {

// Colored-square images on a gray background. The class is the color of the
// large square; a small white spot is added to every other image.
struct SyntheticItem {
  std::string id;
  Image image;
  std::size_t label = 0;
  PixelBox object;                     // the colored square
  std::optional<PixelBox> spot;        // the white spot, when drawn
  std::vector<std::string> present;    // concept texts visible in the image
};

struct SyntheticSpec {
  std::size_t image_size = 24;
  std::size_t classes = 2;  // at most synthetic_class_names().size()
  std::size_t per_class = 4;
  double noise = 0.03;
  std::uint64_t seed = 1;
};

// "red", "blue", "yellow", "green", "purple", "orange"
const std::vector<std::string>& synthetic_class_names();
// One "<color> square" concept per class, then "gray background", "white spot".
std::vector<std::string> synthetic_concepts(std::size_t classes);

// Items are ordered class-major and are a pure function of the spec.
std::vector<SyntheticItem> generate_synthetic(const SyntheticSpec& spec);

// The concepts above with attribute/part split, each class aligned to its
// square and the background.
ConceptSet synthetic_concept_set(std::size_t classes);

// Square and spot boxes keyed by concept text; "square" and "spot" points at
// their centers.
AnnotationStore annotate_synthetic(const std::vector<SyntheticItem>& items);

// Image id -> concept texts drawn in it.
std::map<std::string, std::set<std::string>> synthetic_presence(
    const std::vector<SyntheticItem>& items);

}  // namespace lcbm
