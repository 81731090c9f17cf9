#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <sstream>

#include "test_models.hpp"
#include "treednn/treednn.hpp"

using namespace treednn;
namespace fs = std::filesystem;

namespace {

std::vector<float> vec(const Tensor& x) { return {x.data().begin(), x.data().end()}; }

std::unique_ptr<bundle::Source> memory(const TreeModel& m) {
  return std::make_unique<bundle::MemorySource>(bundle::encode(m));
}

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "treednn_unit";
  fs::create_directories(dir);
  return dir / name;
}

std::uint64_t le(const std::vector<std::uint8_t>& b, std::size_t at, int n) {
  std::uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | b[at + std::size_t(i)];
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// format

TEST(Bundle, ToyModelLayout) {
  const TreeModel m = model_creation(testmodels::toy_spec(), 1);
  const auto bytes = bundle::encode(m);
  ASSERT_GE(bytes.size(), 10u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TDNN");
  EXPECT_EQ(le(bytes, 4, 2), 1u);
  EXPECT_EQ(le(bytes, 6, 4), 3u);

  const auto index = bundle::read_index(bundle::MemorySource(bytes));
  ASSERT_EQ(index.sections.size(), 3u);
  std::uint64_t payload = 0;
  std::size_t total = bundle::kHeaderSize;
  for (const auto& s : index.sections) {
    payload += 4 * s.param_count;
    total += s.size;
    EXPECT_EQ(s.size, bundle::kSectionFixedBytes + s.name.size() + s.spec_text.size() + 4 * s.param_count);
  }
  EXPECT_EQ(payload, 340u);
  EXPECT_EQ(total, bytes.size());
  EXPECT_EQ(index.sections[0].role, bundle::Role::kTrunk);
  EXPECT_EQ(index.sections[1].name, "a");
  EXPECT_EQ(index.sections[1].param_count, 27u);
  EXPECT_EQ(index.sections[2].param_count, 18u);

  // First section starts right after the header: role byte, then the name.
  EXPECT_EQ(bytes[10], 0u);
  EXPECT_EQ(le(bytes, 11, 2), 5u);
  EXPECT_EQ(std::string(bytes.begin() + 13, bytes.begin() + 18), "trunk");
}

TEST(Bundle, ParametersStoredInNameOrderAsLittleEndianFloats) {
  const TreeModel m = model_creation(testmodels::toy_spec(), 3);
  const auto bytes = bundle::encode(m);
  const auto index = bundle::read_index(bundle::MemorySource(bytes));
  const auto& s = index.sections[2];  // branch b: bias[2], weight[8x2]
  const std::size_t payload = s.offset + s.size - 4 - 4 * s.param_count;
  std::vector<float> expect;
  for (const Param* p : sorted_by_name(m.branch("b").parameters())) {
    for (float v : p->value.data()) expect.push_back(v);
  }
  for (std::size_t i = 0; i < expect.size(); ++i) {
    EXPECT_EQ(std::bit_cast<float>(std::uint32_t(le(bytes, payload + 4 * i, 4))), expect[i]);
  }
  // CRC-32 over the section's preceding bytes.
  const auto stored = std::uint32_t(le(bytes, s.offset + s.size - 4, 4));
  EXPECT_EQ(stored, bundle::crc32_of(std::span<const std::uint8_t>(bytes).subspan(s.offset, s.size - 4)));
}

TEST(Bundle, Crc32KnownVector) {
  const std::string msg = "123456789";
  EXPECT_EQ(bundle::crc32_of(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(msg.data()),
                                                           msg.size())),
            0xCBF43926u);
}

TEST(Bundle, RoundTripReferenceModel) {
  TreeModel m = model_creation(testmodels::reference_spec(3, 4), 5);
  // Move the BatchNorm statistics off their defaults.
  (void)m.forward_full("t0", testmodels::random_input({8, 3, 8, 8}, 1), Mode::kTrain);
  const auto path = temp_path("roundtrip.tdnn");
  const auto written = bundle::serialize_split(m, path.string());
  EXPECT_EQ(written, fs::file_size(path));
  const TreeModel back = bundle::load_file(path.string());
  EXPECT_EQ(digest(back.parameters()), digest(m.parameters()));
  const Tensor probe = testmodels::random_input({4, 3, 8, 8}, 2);
  for (const auto& b : m.branches()) {
    EXPECT_EQ(vec(back.forward_full(b.task_id(), probe, Mode::kEval)), vec(m.forward_full(b.task_id(), probe, Mode::kEval)));
  }
  EXPECT_EQ(bundle::encode(back), bundle::encode(m));
}

TEST(Bundle, CorruptBranchByteIsLocalized) {
  const TreeModel m = model_creation(testmodels::toy_spec(), 1);
  auto bytes = bundle::encode(m);
  const auto index = bundle::read_index(bundle::MemorySource(bytes));
  const auto& b = index.sections[1];
  bytes[b.offset + b.size - 10] ^= 0x40;  // inside branch a's payload
  const bundle::MemorySource src(bytes);
  const auto status = bundle::verify(src);
  ASSERT_EQ(status.size(), 3u);
  EXPECT_TRUE(status[0].ok);
  EXPECT_FALSE(status[1].ok);
  EXPECT_TRUE(status[2].ok);

  const auto idx = bundle::read_index(src);
  EXPECT_NO_THROW(bundle::decode_trunk(bundle::load_section(src, idx.trunk())));
  EXPECT_NO_THROW(bundle::decode_branch(bundle::load_section(src, idx.branch("b"))));
  EXPECT_THROW(bundle::load_section(src, idx.branch("a")), ChecksumError);
  EXPECT_THROW(bundle::load(src), ChecksumError);
}

TEST(Bundle, CorruptLengthFieldIsLocalized) {
  const TreeModel m = model_creation(testmodels::toy_spec(), 1);
  auto bytes = bundle::encode(m);
  const auto index = bundle::read_index(bundle::MemorySource(bytes));
  bytes[index.sections[1].offset + 1] ^= 0x11;  // name length of branch a
  const auto status = bundle::verify(bundle::MemorySource(bytes));
  std::size_t bad = 0;
  for (const auto& s : status) bad += !s.ok;
  EXPECT_EQ(bad, 1u);
  const auto idx = bundle::read_index(bundle::MemorySource(bytes));
  EXPECT_TRUE(idx.resynchronized);
  EXPECT_NO_THROW(idx.trunk());
  EXPECT_NO_THROW(idx.branch("b"));
}

TEST(Bundle, BadMagicIsFormatError) {
  auto bytes = bundle::encode(model_creation(testmodels::toy_spec(), 1));
  bytes[0] = 'X';
  EXPECT_THROW(bundle::read_index(bundle::MemorySource(bytes)), FormatError);
  EXPECT_THROW(SwapRuntime(std::make_unique<bundle::MemorySource>(bytes), Policy::kTree), FormatError);
}

TEST(Bundle, TruncatedFileIsDetected) {
  auto bytes = bundle::encode(model_creation(testmodels::toy_spec(), 1));
  bytes.resize(bytes.size() - 7);
  EXPECT_ANY_THROW(bundle::load(bundle::MemorySource(bytes)));
}

// ---------------------------------------------------------------------------
// runtime

TEST(SwapRuntime, LoadCounters) {
  const TreeModel m = model_creation(testmodels::toy_spec(), 1);
  SwapRuntime rt(memory(m), Policy::kTree);
  EXPECT_EQ(rt.loads_performed(), 1u);
  EXPECT_EQ(rt.bytes_loaded_total(), rt.index().trunk().size);
  EXPECT_EQ(rt.resident_bytes(), rt.index().trunk().size);
  EXPECT_FALSE(rt.current_task());
}

TEST(SwapRuntime, LoadFromFileIsDeterministic) {
  const auto path = temp_path("swap.tdnn");
  bundle::serialize_split(model_creation(testmodels::reference_spec(2, 3), 4), path.string());
  auto a = SwapRuntime::load_trunk(path.string());
  auto b = SwapRuntime::load_trunk(path.string());
  EXPECT_EQ(a.trunk_digest(), b.trunk_digest());
}

TEST(SwapRuntime, SwapAccounting) {
  const TreeModel m = model_creation(testmodels::toy_spec(), 1);
  SwapRuntime rt(memory(m), Policy::kTree);
  const auto trunk = rt.index().trunk().size;
  const auto& ea = rt.index().branch("a");
  const auto& eb = rt.index().branch("b");
  EXPECT_EQ(ea.size, bundle::kSectionFixedBytes + 1 + ea.spec_text.size() + 4 * 27);

  rt.swap_branch("a");
  EXPECT_EQ(rt.bytes_loaded_total(), trunk + ea.size);
  EXPECT_EQ(rt.loads_performed(), 2u);
  rt.swap_branch("a");  // resident: free
  EXPECT_EQ(rt.bytes_loaded_total(), trunk + ea.size);
  EXPECT_EQ(rt.loads_performed(), 2u);
  rt.swap_branch("b");
  EXPECT_EQ(rt.bytes_loaded_total(), trunk + ea.size + eb.size);
  EXPECT_EQ(rt.resident_bytes(), trunk + eb.size);
  EXPECT_EQ(rt.resident_high_water(), trunk + std::max(ea.size, eb.size));
  EXPECT_EQ(rt.swap_times_ms().size(), 2u);
  EXPECT_EQ(*rt.current_task(), "b");
  EXPECT_THROW(rt.swap_branch("nope"), LookupError);
}

TEST(SwapRuntime, DedicatedReloadsTrunkPerColdSwap) {
  const TreeModel m = model_creation(testmodels::toy_spec(), 1);
  SwapRuntime rt(memory(m), Policy::kDedicated);
  EXPECT_EQ(rt.bytes_loaded_total(), 0u);
  const auto trunk = rt.index().trunk().size;
  const auto a = rt.index().branch("a").size, b = rt.index().branch("b").size;
  rt.swap_branch("a");
  rt.swap_branch("b");
  rt.swap_branch("b");
  rt.swap_branch("a");
  EXPECT_EQ(rt.bytes_loaded_total(), 3 * trunk + 2 * a + b);
}

TEST(SwapRuntime, InferMatchesInMemoryModel) {
  TreeModel m = model_creation(testmodels::reference_spec(3, 4), 8);
  (void)m.forward_full("t1", testmodels::random_input({6, 3, 8, 8}, 9), Mode::kTrain);
  SwapRuntime rt(memory(m), Policy::kTree);
  const Tensor x = testmodels::random_input({5, 3, 8, 8}, 10);
  for (const std::string task : {"t2", "t0", "t1"}) {
    rt.swap_branch(task);
    EXPECT_EQ(vec(rt.infer(x)), vec(m.forward_full(task, x, Mode::kEval))) << task;
  }
}

TEST(SwapRuntime, InferErrors) {
  const TreeModel m = model_creation(testmodels::toy_spec(), 1);
  SwapRuntime rt(memory(m), Policy::kTree);
  EXPECT_THROW(rt.infer(Tensor::zeros({1, 4})), StateError);
  rt.swap_branch("a");
  EXPECT_THROW(rt.infer(Tensor::zeros({1, 5})), DimensionError);
}

TEST(SwapRuntime, CorruptBranchFailsOnlyThatSwap) {
  const TreeModel m = model_creation(testmodels::toy_spec(), 1);
  auto bytes = bundle::encode(m);
  const auto idx = bundle::read_index(bundle::MemorySource(bytes));
  bytes[idx.sections[2].offset + idx.sections[2].size - 6] ^= 0x01;
  SwapRuntime rt(std::make_unique<bundle::MemorySource>(bytes), Policy::kTree);
  EXPECT_NO_THROW(rt.swap_branch("a"));
  EXPECT_THROW(rt.swap_branch("b"), ChecksumError);
}

// ---------------------------------------------------------------------------
// storage report

TEST(StorageReport, ToyModel) {
  const auto r = storage_report(bundle::read_index(bundle::MemorySource(bundle::encode(model_creation(testmodels::toy_spec(), 1)))));
  EXPECT_EQ(r.tree_params, 85u);
  EXPECT_EQ(r.dedicated_params, 125u);
  EXPECT_DOUBLE_EQ(r.ratio, 85.0 / 125.0);
  EXPECT_NEAR(r.ratio, 0.68, 1e-12);
  EXPECT_EQ(r.tree_bytes, 340u);
  EXPECT_EQ(r.dedicated_bytes, 500u);
}

TEST(StorageReport, SingleTaskRatioIsOne) {
  ModelSpec spec = testmodels::toy_spec();
  spec.branches.resize(1);
  const auto r = storage_report(bundle::read_index(bundle::MemorySource(bundle::encode(model_creation(spec, 1)))));
  EXPECT_EQ(r.ratio, 1.0);
}

TEST(StorageReport, ShowsDeployedReferenceWithoutAsserting) {
  const auto r = storage_report(bundle::read_index(bundle::MemorySource(bundle::encode(model_creation(testmodels::toy_spec(), 1)))));
  const auto text = r.to_text();
  EXPECT_NE(text.find("120 MB -> 68 MB"), std::string::npos);
  EXPECT_NE(text.find("ratio=0.680000"), std::string::npos);
}

// ---------------------------------------------------------------------------
// switch simulator

namespace {

bundle::Index toy_index() {
  return bundle::read_index(bundle::MemorySource(bundle::encode(model_creation(testmodels::toy_spec(), 1))));
}

}  // namespace

TEST(SwitchSim, SingleTaskTraceCostsTheSameUnderBothPolicies) {
  const auto index = toy_index();
  const std::vector<std::string> trace{"a", "a", "a"};
  const auto tree = switch_simulate(index, trace, Policy::kTree);
  const auto ded = switch_simulate(index, trace, Policy::kDedicated);
  EXPECT_EQ(tree.cumulative_bytes, ded.cumulative_bytes);
  EXPECT_EQ(tree.cumulative_bytes, index.trunk().size + index.branch("a").size);
}

TEST(SwitchSim, AlternatingTraceClosedForm) {
  const auto index = toy_index();
  std::vector<std::string> trace;
  for (int i = 0; i < 10; ++i) trace.push_back(i % 2 ? "b" : "a");
  const std::uint64_t T = index.trunk().size, A = index.branch("a").size, B = index.branch("b").size;
  const auto tree = switch_simulate(index, trace, Policy::kTree);
  const auto ded = switch_simulate(index, trace, Policy::kDedicated);
  EXPECT_EQ(tree.cumulative_bytes, T + 5 * A + 5 * B);
  EXPECT_EQ(ded.cumulative_bytes, 10 * T + 5 * A + 5 * B);
  EXPECT_LT(tree.cumulative_bytes, ded.cumulative_bytes);
  EXPECT_EQ(tree.events[1].bytes, B);
  EXPECT_EQ(ded.events[1].bytes, T + B);
}

TEST(SwitchSim, ModeledResponseTime) {
  const auto index = toy_index();
  const CostModel cost{1000.0, 2.5};
  const auto r = switch_simulate(index, {"a", "a"}, Policy::kTree, cost);
  EXPECT_DOUBLE_EQ(r.events[0].modeled_ms, double(index.trunk().size + index.branch("a").size) / 1000.0 + 2.5);
  EXPECT_DOUBLE_EQ(r.events[1].modeled_ms, 2.5);
}

TEST(SwitchSim, UnknownTaskRejected) {
  EXPECT_THROW(switch_simulate(toy_index(), {"a", "zz"}, Policy::kTree), LookupError);
}

TEST(SwitchSim, ReportLines) {
  const auto r = switch_simulate(toy_index(), {"a", "b"}, Policy::kDedicated);
  std::istringstream in(r.to_text());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[2].rfind("0 a dedicated ", 0), 0u) << lines[2];
  EXPECT_EQ(lines[4].rfind("summary policy=dedicated switches=2 cold_loads=2", 0), 0u) << lines[4];
}

TEST(Trace, ParseFileFormat) {
  const auto index = toy_index();
  std::istringstream ok("# header\na\n\n b  # trailing\na\n");
  EXPECT_EQ(parse_trace(ok, index), (std::vector<std::string>{"a", "b", "a"}));
  std::istringstream bad("a\nb\nqq\n");
  try {
    parse_trace(bad, index);
    FAIL();
  } catch (const LookupError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'qq'"), std::string::npos) << msg;
  }
}

TEST(Trace, GeneratorIsSeededAndWeighted) {
  const std::vector<std::string> tasks{"a", "b"};
  EXPECT_EQ(generate_trace(tasks, 50, {}, 3), generate_trace(tasks, 50, {}, 3));
  const auto only_b = generate_trace(tasks, 20, {0.0, 1.0}, 1);
  for (const auto& t : only_b) EXPECT_EQ(t, "b");
  EXPECT_THROW(generate_trace(tasks, 5, {1.0}, 1), ConfigError);
}
