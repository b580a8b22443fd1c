#pragma once

#include <string>

#include "tensor.hpp"

namespace duvsynth {

// Class labels are fixed project-wide: malignant is the positive class.
inline constexpr int64_t kBenign = 0;
inline constexpr int64_t kMalignant = 1;

inline const char* label_name(int64_t label) { return label == kMalignant ? "malignant" : "benign"; }

// One image tile with its parent slide and label; the unit of training,
// synthesis and classification. Synthetic patches remember the real patch
// whose embedding conditioned them (leakage accounting).
struct Patch {
    std::string patch_id;
    std::string wsi_id;
    int64_t label = kBenign;
    Tensor image;  // [S x S x 3] in [0,1]
    bool synthetic = false;
    std::string source_patch_id;
};

}  // namespace duvsynth
