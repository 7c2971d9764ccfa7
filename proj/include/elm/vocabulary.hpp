#pragma once

namespace elm::vocab {

// Reserved ids shared by the corpus generator, pretraining and the proxy tasks.
inline constexpr int kMask = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kFirstContent = 3;

}  // namespace elm::vocab
