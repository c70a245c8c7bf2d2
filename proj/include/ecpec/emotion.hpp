#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace ecpec {

// Fine-grained emotion taxonomy. The integer codes are stable and used as
// row indices of every emotion embedding / classification head.
enum class EmotionLabel : int { neutral = 0, surprise, fear, sadness, joy, disgust, anger };

enum class CoarseLabel : int { neutral = 0, positive, negative };

inline constexpr int kNumEmotions = 7;
inline constexpr int kNumCoarse = 3;

inline constexpr std::array<EmotionLabel, kNumEmotions> kAllEmotions = {
    EmotionLabel::neutral, EmotionLabel::surprise, EmotionLabel::fear,  EmotionLabel::sadness,
    EmotionLabel::joy,     EmotionLabel::disgust,  EmotionLabel::anger};

std::string_view emotion_name(EmotionLabel label);
std::string_view coarse_name(CoarseLabel label);

// Case-insensitive; returns nullopt for anything outside the taxonomy.
std::optional<EmotionLabel> emotion_from_name(std::string_view name);
EmotionLabel emotion_from_code(int code);  // throws std::out_of_range

inline int code_of(EmotionLabel label) { return static_cast<int>(label); }

CoarseLabel coarse_of(EmotionLabel label);

}  // namespace ecpec
