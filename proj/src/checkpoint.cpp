#include "moenc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "moenc/config_io.hpp"

namespace moenc {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are unsupported");

constexpr char kMagic[8] = {'M', 'O', 'E', 'N', 'C', 'K', 'P', 'T'};
constexpr char kEndMagic[8] = {'M', 'O', 'E', 'N', 'C', 'E', 'N', 'D'};

void write_bytes(std::ofstream& out, const void* data, std::size_t n) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& in, void* data, std::size_t n, const char* what) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n)) {
        throw IoError(std::string("checkpoint truncated while reading ") + what);
    }
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
    write_bytes(out, &v, sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
    T v;
    read_bytes(in, &v, sizeof(T), what);
    return v;
}

}  // namespace

Checkpoint Checkpoint::from_model(const Model& model, std::int64_t step) {
    Checkpoint c;
    c.config = model.config;
    c.step = step;
    c.tensors = model.named_tensors();
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());

    nlohmann::json header;
    header["version"] = Checkpoint::kVersion;
    header["step"] = ckpt.step;
    header["config"] = train_config_to_json(ckpt.config);
    nlohmann::json tensor_meta = nlohmann::json::array();
    for (const auto& [name, var] : ckpt.tensors) {
        tensor_meta.push_back({{"name", name}, {"shape", var.shape()}});
    }
    header["tensors"] = std::move(tensor_meta);
    const std::string header_bytes = header.dump();

    write_bytes(out, kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(out, Checkpoint::kVersion);
    write_pod<std::uint64_t>(out, header_bytes.size());
    write_bytes(out, header_bytes.data(), header_bytes.size());
    for (const auto& [name, var] : ckpt.tensors) {
        write_bytes(out, var.value().data(), var.value().size() * sizeof(double));
    }
    write_bytes(out, kEndMagic, sizeof(kEndMagic));
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());

    char magic[8];
    read_bytes(in, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError("not a checkpoint file: " + path.string());
    }
    const auto version = read_pod<std::uint32_t>(in, "version");
    if (version != Checkpoint::kVersion) {
        throw IoError("checkpoint version " + std::to_string(version) + " is incompatible with version " +
                      std::to_string(Checkpoint::kVersion));
    }
    const auto header_len = read_pod<std::uint64_t>(in, "header length");
    std::string header_bytes(header_len, '\0');
    read_bytes(in, header_bytes.data(), header_len, "header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_bytes);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(std::string("corrupt checkpoint header: ") + e.what());
    }

    Checkpoint ckpt;
    ckpt.config = train_config_from_json(header.at("config"));
    ckpt.step = header.at("step").get<std::int64_t>();
    for (const auto& meta : header.at("tensors")) {
        const std::string name = meta.at("name").get<std::string>();
        const std::vector<int> shape = meta.at("shape").get<std::vector<int>>();
        std::vector<double> data(static_cast<std::size_t>(ad::shape_size(shape)));
        read_bytes(in, data.data(), data.size() * sizeof(double), ("tensor " + name).c_str());
        ckpt.tensors.emplace_back(name, ad::leaf(shape, std::move(data)));
    }
    char end_magic[8];
    read_bytes(in, end_magic, sizeof(end_magic), "end marker");
    if (std::memcmp(end_magic, kEndMagic, sizeof(kEndMagic)) != 0) {
        throw IoError("checkpoint missing end marker (truncated or corrupt): " + path.string());
    }
    if (in.peek() != std::ifstream::traits_type::eof()) {
        throw IoError("trailing bytes after checkpoint end marker: " + path.string());
    }
    return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    Model model = Model::init(ckpt.config);
    auto live = model.named_tensors();
    if (live.size() != ckpt.tensors.size()) {
        throw IoError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model needs " +
                      std::to_string(live.size()));
    }
    for (auto& [name, var] : live) {
        const ad::Var* stored = nullptr;
        for (const auto& [ckpt_name, ckpt_var] : ckpt.tensors) {
            if (ckpt_name == name) {
                stored = &ckpt_var;
                break;
            }
        }
        if (!stored) throw IoError("checkpoint is missing tensor '" + name + "'");
        if (stored->shape() != var.shape()) {
            throw IoError("checkpoint tensor '" + name + "' has shape " + ad::shape_str(stored->shape()) +
                          ", model expects " + ad::shape_str(var.shape()));
        }
        var.mutable_value() = stored->value();
    }
    return model;
}

void check_checkpoint_compatible(const Checkpoint& ckpt, const TrainConfig& config) {
    const auto& a = ckpt.config;
    auto mismatch = [](const std::string& what, auto lhs, auto rhs) {
        throw ConfigError("checkpoint incompatible with run config: " + what + " is " +
                          std::to_string(lhs) + " in the checkpoint but " + std::to_string(rhs) +
                          " in the config");
    };
    if (a.workload.num_experts != config.workload.num_experts) {
        mismatch("experts", a.workload.num_experts, config.workload.num_experts);
    }
    if (a.workload.num_classes != config.workload.num_classes) {
        mismatch("classes", a.workload.num_classes, config.workload.num_classes);
    }
    if (a.workload.d_img != config.workload.d_img) mismatch("d_img", a.workload.d_img, config.workload.d_img);
    if (a.workload.d_shared != config.workload.d_shared) {
        mismatch("d_shared", a.workload.d_shared, config.workload.d_shared);
    }
    if (a.workload.d_routed != config.workload.d_routed) {
        mismatch("d_routed", a.workload.d_routed, config.workload.d_routed);
    }
    if (a.workload.d_text != config.workload.d_text) {
        mismatch("d_text", a.workload.d_text, config.workload.d_text);
    }
    if (a.d_router != config.d_router) mismatch("d_router", a.d_router, config.d_router);
    if (a.num_heads != config.num_heads) mismatch("num_heads", a.num_heads, config.num_heads);
    if (a.router != config.router) {
        throw ConfigError("checkpoint incompatible with run config: router variant is " +
                          to_string(a.router) + " in the checkpoint but " + to_string(config.router) +
                          " in the config");
    }
}

}  // namespace moenc
