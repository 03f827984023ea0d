#pragma once

namespace relikin {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kCorpusFormatVersion = "relikin-corpus/1";
inline constexpr const char* kCheckpointFormatVersion = "relikin-checkpoint/1";
inline constexpr const char* kRunManifestFormatVersion = "relikin-run/1";

} // namespace relikin
