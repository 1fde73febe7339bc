#pragma once

#include <string>

#include "alignps/data.hpp"
#include "alignps/eval.hpp"
#include "alignps/model.hpp"

namespace alignps {

/// Run the model over every manifest image at the canonical test size and
/// serialize the result for the evaluator: per-image detections with boxes
/// mapped back to original pixel coordinates, plus one embedding per query
/// taken from the query box's center location on the finest aggregated map.
/// Each image is forwarded exactly once; queries reuse that pass.
PredictionSet predict_dataset(const Model &model, const DatasetManifest &m,
                              const std::string &image_dir, const TransformConfig &tcfg);

}  // namespace alignps
