#pragma once

#include <string>

namespace vcpseg {

// Maps a public dual-encoder checkpoint in safetensors layout
// (token_embedding.weight, transformer.resblocks.{i}.*, visual.*) onto the
// named-tensor archive scheme used by Backbone::load. Supports F32/F16/BF16
// sources; the output archive is f32. Returns the number of tensors written.
int convert_safetensors_backbone(const std::string& safetensors_path,
                                 const std::string& archive_path);

}  // namespace vcpseg
