#pragma once

// Static bar charts rendered straight into an RGB raster: one panel per
// metric, mean bars with +/- std whiskers, labels in a 5x7 bitmap font.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "modsynth/image_io.hpp"

namespace modsynth {

namespace detail {

struct Glyph {
  char ch;
  std::array<std::uint8_t, 7> rows;  // 5 bits per row, MSB on the left
};

inline const std::vector<Glyph>& font5x7() {
  static const std::vector<Glyph> glyphs = {
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}}, {'>', {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08}},
      {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}}, {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
      {'x', {0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11}}, {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
      {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}}, {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
  };
  return glyphs;
}

inline const Glyph* find_glyph(char c) {
  if (c != 'x') c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& g : font5x7()) {
    if (g.ch == c) return &g;
  }
  return nullptr;
}

/// Replaces the UTF-8 arrow and multiplication sign with ASCII stand-ins.
inline std::string plot_ascii(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.compare(i, 3, "\xE2\x86\x92") == 0) {
      out += ">";
      i += 2;
    } else if (s.compare(i, 2, "\xC3\x97") == 0) {
      out += "x";
      i += 1;
    } else {
      out += s[i];
    }
  }
  return out;
}

}  // namespace detail

inline constexpr int kGlyphAdvance = 6;

inline int text_width(const std::string& s) { return static_cast<int>(detail::plot_ascii(s).size()) * kGlyphAdvance; }

/// Draws `text` with its top-left corner at (x, y); unknown characters render blank.
inline void draw_text(RgbImage& img, int x, int y, const std::string& text, std::uint32_t rgb = 0x202020) {
  for (char c : detail::plot_ascii(text)) {
    if (const auto* g = detail::find_glyph(c)) {
      for (int r = 0; r < 7; ++r)
        for (int b = 0; b < 5; ++b)
          if (g->rows[r] & (0x10 >> b)) img.set(x + b, y + r, rgb);
    }
    x += kGlyphAdvance;
  }
}

struct BarSeries {
  std::string title;  // e.g. "PSNR"
  std::vector<double> mean;
  std::vector<double> std;
  int decimals = 2;
};

/// One panel per series, bars in label order. Returns the rendered image.
inline RgbImage render_bar_chart(const std::vector<std::string>& labels, const std::vector<BarSeries>& panels) {
  static constexpr std::uint32_t kPalette[] = {0x4C72B0, 0xDD8452, 0x55A868, 0xC44E52, 0x8172B3, 0x937860};
  std::size_t longest = 0;
  for (const auto& l : labels) longest = std::max(longest, detail::plot_ascii(l).size());
  const int slot = std::max(56, static_cast<int>(longest) * kGlyphAdvance + 10);
  const int plot_h = 220, top = 40, label_h = 24, margin = 16;
  const int panel_w = slot * static_cast<int>(labels.size()) + 2 * margin;
  const int width = std::max(1, panel_w * static_cast<int>(panels.size()));
  const int height = top + plot_h + label_h + margin;
  RgbImage img(width, height);
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const BarSeries& s = panels[p];
    const int x0 = static_cast<int>(p) * panel_w + margin;
    const int base = top + plot_h;
    double hi = 0.0;
    for (std::size_t i = 0; i < s.mean.size(); ++i) {
      const double sd = i < s.std.size() && std::isfinite(s.std[i]) ? s.std[i] : 0.0;
      if (std::isfinite(s.mean[i])) hi = std::max(hi, s.mean[i] + sd);
    }
    if (hi <= 0.0) hi = 1.0;
    hi *= 1.1;
    draw_text(img, x0, 8, s.title);
    img.fill_rect(x0, base, x0 + slot * static_cast<int>(labels.size()), base + 1, 0x000000);
    for (std::size_t i = 0; i < labels.size() && i < s.mean.size(); ++i) {
      const int bx = x0 + static_cast<int>(i) * slot;
      const double m = std::isfinite(s.mean[i]) ? std::max(0.0, s.mean[i]) : 0.0;
      const int bar_top = base - static_cast<int>(std::lround(m / hi * plot_h));
      int label_y = bar_top - 10;
      img.fill_rect(bx + 8, bar_top, bx + slot - 8, base, kPalette[i % std::size(kPalette)]);
      if (i < s.std.size() && std::isfinite(s.std[i]) && s.std[i] > 0.0) {
        const int cx = bx + slot / 2;
        const int y_lo = base - static_cast<int>(std::lround(std::max(0.0, m - s.std[i]) / hi * plot_h));
        const int y_hi = base - static_cast<int>(std::lround((m + s.std[i]) / hi * plot_h));
        img.fill_rect(cx, y_hi, cx + 1, y_lo + 1, 0x000000);
        img.fill_rect(cx - 4, y_hi, cx + 5, y_hi + 1, 0x000000);
        img.fill_rect(cx - 4, y_lo, cx + 5, y_lo + 1, 0x000000);
        label_y = std::min(label_y, y_hi - 10);
      }
      char value[32];
      std::snprintf(value, sizeof value, "%.*f", s.decimals, s.mean[i]);
      draw_text(img, bx + (slot - text_width(value)) / 2, std::max(top - 12, label_y), value);
      draw_text(img, bx + (slot - text_width(labels[i])) / 2, base + 8, labels[i]);
    }
  }
  return img;
}

}  // namespace modsynth
