#include "ecpec/emotion.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>
#include <string>

namespace ecpec {

namespace {
constexpr std::array<std::string_view, kNumEmotions> kEmotionNames = {"neutral", "surprise", "fear",   "sadness",
                                                                      "joy",     "disgust",  "anger"};
constexpr std::array<std::string_view, kNumCoarse> kCoarseNames = {"neutral", "positive", "negative"};
}  // namespace

std::string_view emotion_name(EmotionLabel label) { return kEmotionNames.at(static_cast<std::size_t>(label)); }

std::string_view coarse_name(CoarseLabel label) { return kCoarseNames.at(static_cast<std::size_t>(label)); }

std::optional<EmotionLabel> emotion_from_name(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (int i = 0; i < kNumEmotions; ++i)
    if (kEmotionNames[static_cast<std::size_t>(i)] == lower) return static_cast<EmotionLabel>(i);
  return std::nullopt;
}

EmotionLabel emotion_from_code(int code) {
  if (code < 0 || code >= kNumEmotions) throw std::out_of_range("emotion code " + std::to_string(code));
  return static_cast<EmotionLabel>(code);
}

CoarseLabel coarse_of(EmotionLabel label) {
  switch (label) {
    case EmotionLabel::neutral:
      return CoarseLabel::neutral;
    case EmotionLabel::surprise:
    case EmotionLabel::joy:
      return CoarseLabel::positive;
    case EmotionLabel::fear:
    case EmotionLabel::sadness:
    case EmotionLabel::disgust:
    case EmotionLabel::anger:
      return CoarseLabel::negative;
  }
  throw std::out_of_range("coarse_of: invalid emotion");
}

}  // namespace ecpec
