#ifndef ASDM_CHECKPOINT_HPP
#define ASDM_CHECKPOINT_HPP

#include <string>
#include <utility>
#include <vector>

#include "asdm/unet.hpp"

namespace asdm {

// Binary container: magic "ASDM", u32 LE format version, u64 LE header
// length, JSON header (config plus a tensor index of name/shape/offset
// entries), then the payload of raw little-endian float32 data. Offsets are
// payload-relative, validated to be non-overlapping and in bounds on load.

constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const UNet& model, const std::string& path);
UNet load_checkpoint(const std::string& path);

// The same container for plain named-tensor payloads (dataset export).
struct TensorArchive {
    std::string kind;  // free-form, e.g. "dataset"
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::string meta_json;  // optional extra header content
};

void save_archive(const TensorArchive& a, const std::string& path);
TensorArchive load_archive(const std::string& path);

std::string config_to_json(const UNetConfig& config);
UNetConfig config_from_json(const std::string& text);

}  // namespace asdm

#endif
