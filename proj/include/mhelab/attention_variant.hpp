#pragma once

#include <array>
#include <string>
#include <string_view>

namespace mhelab {

// The seven attention mechanisms handled by this project. Every switch over
// this enum is total; parse/format round-trip through the canonical names.
enum class AttentionVariant { sha, mha, el_att, mqa, skv, mhe_add, mhe_mul };

inline constexpr std::array<AttentionVariant, 7> kAllVariants = {
    AttentionVariant::sha,     AttentionVariant::mha,     AttentionVariant::el_att,
    AttentionVariant::mqa,     AttentionVariant::skv,     AttentionVariant::mhe_add,
    AttentionVariant::mhe_mul,
};

std::string_view variant_name(AttentionVariant v);

// Accepts canonical names plus the dashed spellings used in the paper's
// tables ("el-att", "mhe-mul", ...); case-insensitive. Throws ContractError
// listing the valid tags otherwise.
AttentionVariant parse_variant(std::string_view name);

bool is_mhe(AttentionVariant v);

}  // namespace mhelab
