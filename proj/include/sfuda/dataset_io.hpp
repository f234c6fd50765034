#ifndef SFUDA_DATASET_IO_HPP
#define SFUDA_DATASET_IO_HPP

#include <string>

#include "sfuda/data.hpp"

namespace sfuda {

/// On-disk layout: images/NNNN.png (8-bit gray), masks/NNNN.png (8-bit class
/// ids), meta.json (specs, seeds, split membership).
void write_dataset(const std::string& dir, const Benchmark& bench);

/// Rebuilds the bundle from disk. Image intensities carry 8-bit
/// quantization; split membership and masks are exact.
Benchmark read_dataset(const std::string& dir);

}  // namespace sfuda

#endif
