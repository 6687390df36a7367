#ifndef EMORL_SCENE_DATA_HPP
#define EMORL_SCENE_DATA_HPP

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace emorl {

using Rgb = std::array<float, 3>;

enum class ShapeKind : std::uint8_t { Tetromino, Sprite };

// Sprite shape ids.
inline constexpr std::uint32_t kSquare = 0;
inline constexpr std::uint32_t kEllipse = 1;
inline constexpr std::uint32_t kTriangle = 2;
// Number of fixed tetromino orientations (I:2, O:1, T:4, S:2, Z:2, L:4, J:4).
inline constexpr std::uint32_t kTetrominoCount = 19;

struct ObjectFactors {
    std::uint32_t shape_id = 0;
    Rgb color{0.f, 0.f, 0.f};
    float scale = 0.f;     // fraction of image height
    float x = 0.f;         // object centre, [0,1] of image width
    float y = 0.f;         // object centre, [0,1] of image height
    float angle = 0.f;     // radians, [0, 2pi)
};

/// Generative factors of a scene. Objects are stored in draw order: later
/// entries occlude earlier ones.
struct SceneFactors {
    std::vector<ObjectFactors> objects;
    Rgb background{0.f, 0.f, 0.f};
};

struct Scene {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> image;       // H*W*3, row-major, interleaved RGB
    std::vector<std::uint8_t> true_masks;  // (n_objects+1)*H*W, channel 0 = background
    SceneFactors factors;

    [[nodiscard]] std::size_t num_objects() const { return factors.objects.size(); }
    [[nodiscard]] std::size_t num_pixels() const { return static_cast<std::size_t>(height) * width; }
    [[nodiscard]] std::uint8_t mask(std::size_t channel, int i, int j) const {
        return true_masks[channel * num_pixels() + static_cast<std::size_t>(i) * width + j];
    }
    /// Per-pixel ground-truth label: 0 for background, o+1 for object o.
    [[nodiscard]] std::vector<int> label_map() const;

    bool operator==(const Scene&) const = default;
};

inline bool operator==(const ObjectFactors& a, const ObjectFactors& b) {
    return a.shape_id == b.shape_id && a.color == b.color && a.scale == b.scale && a.x == b.x &&
           a.y == b.y && a.angle == b.angle;
}
inline bool operator==(const SceneFactors& a, const SceneFactors& b) {
    return a.objects == b.objects && a.background == b.background;
}

/// Scene generator configuration.
struct GeneratorPreset {
    std::string name;
    int height = 32;
    int width = 32;
    ShapeKind shapes = ShapeKind::Tetromino;
    int min_objects = 3;
    int max_objects = 3;
    bool allow_overlap = false;
    // Discrete palette; when empty, colours are drawn uniformly from [0.2,1]^3.
    std::vector<Rgb> palette;
    // Tetromino cell size in pixels.
    int block_size = 4;
    // Sprite scale range, as fraction of image height.
    float min_scale = 0.15f;
    float max_scale = 0.3f;
    // Background: fixed colour, or uniform random gray in [gray_lo, gray_hi].
    bool random_gray_background = false;
    Rgb background{0.f, 0.f, 0.f};
    float gray_lo = 0.f;
    float gray_hi = 0.5f;

    /// Largest pixel extent any object can reach.
    [[nodiscard]] double max_object_extent() const;
    /// Throws ConfigError when the preset cannot be rendered.
    void validate() const;
};

GeneratorPreset tetromino_preset();
GeneratorPreset sprites_preset();
/// Looks up "tetromino" or "sprites"; throws ConfigError otherwise.
GeneratorPreset preset_by_name(const std::string& name);

/// Deterministic in (seed, preset).
Scene generate_scene(std::uint64_t seed, const GeneratorPreset& preset);

/// Rasterises factors into image and visible-pixel masks. generate_scene is
/// this function applied to sampled factors.
Scene render_scene(const SceneFactors& factors, const GeneratorPreset& preset);

/// Per-scene seed used by dataset generation.
std::uint64_t scene_seed(std::uint64_t base_seed, std::uint64_t index);

// Dataset file ----------------------------------------------------------------

inline constexpr std::array<char, 8> kDatasetMagic{'E', 'M', 'O', 'R', 'L', 'D', 'S', '\0'};
inline constexpr std::array<char, 8> kIndexMagic{'E', 'M', 'O', 'R', 'L', 'I', 'D', 'X'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kHeaderBytes = 64;
inline constexpr std::size_t kPresetNameBytes = 24;

struct DatasetHeader {
    std::uint32_t version = kDatasetVersion;
    std::uint32_t scene_count = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t max_objects = 0;
    std::uint64_t seed = 0;
    std::string preset;
};

void write_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& path,
                   std::uint32_t max_objects, std::uint64_t seed, const std::string& preset);

/// Random-access reader. Scenes are decoded on demand; a const reader is
/// safe to share between threads.
class DatasetReader {
public:
    explicit DatasetReader(const std::filesystem::path& path);

    [[nodiscard]] const DatasetHeader& header() const { return header_; }
    [[nodiscard]] std::size_t size() const { return offsets_.size(); }
    [[nodiscard]] Scene at(std::size_t index) const;

private:
    std::filesystem::path path_;
    DatasetHeader header_;
    std::vector<std::uint64_t> offsets_;
    std::uint64_t payload_end_ = 0;
};

/// Contiguous index range over a dataset.
class DatasetView {
public:
    DatasetView(const DatasetReader* reader, std::size_t begin, std::size_t count)
        : reader_(reader), begin_(begin), count_(count) {}

    [[nodiscard]] std::size_t size() const { return count_; }
    [[nodiscard]] bool empty() const { return count_ == 0; }
    [[nodiscard]] std::size_t begin_index() const { return begin_; }
    [[nodiscard]] Scene at(std::size_t i) const;

private:
    const DatasetReader* reader_;
    std::size_t begin_;
    std::size_t count_;
};

/// train = [0, n_train), test = [n_train, n_train + n_test).
std::pair<DatasetView, DatasetView> split_dataset(const DatasetReader& reader, std::size_t n_train,
                                                  std::size_t n_test);

}  // namespace emorl

#endif  // EMORL_SCENE_DATA_HPP
