import csv
import io
import json
import subprocess
import sys

import pytest

from bitnet_lab.arch import from_json
from bitnet_lab.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestArchitectureCommands:
    def test_count_headline(self, capsys):
        code, out, _ = run(capsys, "count", "--cifar", "d=4", "k=3", "n=4", "--kind", "bit")
        assert code == 0
        assert "3.7M" in out and "depth=38" in out

    def test_count_json(self, capsys):
        _, out, _ = run(capsys, "count", "--cifar", "d=4", "k=3", "n=4", "--json")
        doc = json.loads(out)
        assert (doc["params_m"], doc["depth"]) == (3.7, 38)

    def test_count_csv_per_layer(self, capsys):
        _, summary, _ = run(capsys, "count", "--cifar", "d=1", "k=1", "n=1", "--json")
        _, out, _ = run(capsys, "count", "--cifar", "d=1", "k=1", "n=1", "--csv", "--per-layer")
        table = rows(out)
        assert list(table[0]) == ["layer_id", "kind", "params", "flops"]
        assert sum(int(r["params"]) for r in table) == json.loads(summary)["params"]

    def test_flops_input_size(self, capsys):
        _, out, _ = run(capsys, "flops", "--cifar", "d=1", "k=1", "n=1", "--csv")
        assert rows(out)[0]["flops"] == "5161600"

    @pytest.mark.parametrize("flag,expected", [("--bitnet34", "34"), ("--bitnet26", "26")])
    def test_depth(self, capsys, flag, expected):
        assert run(capsys, "depth", flag)[1].strip() == expected

    def test_export_round_trip(self, capsys, tmp_path):
        path = tmp_path / "net.json"
        assert run(capsys, "export-arch", "--cifar", "d=2", "k=2", "n=1", "--out", str(path))[0] == 0
        net = from_json(path.read_text())
        assert net.groups[0].block.width_D == 32
        _, out, _ = run(capsys, "depth", "--arch-json", str(path))
        assert out.strip() == "8"

    def test_table2_csv(self, capsys):
        _, out, _ = run(capsys, "table2", "--csv")
        table = rows(out)
        assert len(table) == 14
        assert all(r["params_m"] == r["params_m_published"] for r in table)

    def test_table3(self, capsys):
        _, out, _ = run(capsys, "table2", "--imagenet", "--json")
        assert [r["depth"] for r in json.loads(out)] == [26, 34]


class TestRegionCommands:
    def test_bitnet_bound(self, capsys):
        code, out, _ = run(capsys, "bounds", "--bitnet", "D=8", "K=2", "L=1", "n=2", "--form", "per_layer_product")
        assert (code, out.strip()) == (0, "4")

    def test_conven_bound_csv(self, capsys):
        _, out, _ = run(capsys, "bounds", "--conven", "D=4", "K=2", "L=1", "n=2", "--csv")
        assert rows(out) == [{"family": "conven", "D": "4", "K": "2", "L": "1", "n": "2",
                              "form": "simplified", "bound": "16"}]

    def test_regions_csv(self, capsys):
        _, out, _ = run(capsys, "regions", "--widths", "3", "--input-dim", "2", "--nets", "3", "--csv")
        table = rows(out)
        assert len(table) == 3
        assert all(r["regions"] == r["zaslavsky"] == "7" for r in table)

    def test_sawtooth(self, capsys):
        assert run(capsys, "sawtooth", "--widths", "3", "3", "3")[1].strip() == "27"


class TestExperimentCommands:
    def test_train_deterministic(self, capsys, tmp_path):
        args = ("train", "--fc", "d=1", "k=1", "n=1", "--count", "64", "--epochs", "2", "--csv", "--seed", "4")
        _, first, _ = run(capsys, *args)
        _, second, _ = run(capsys, *args, "--out", str(tmp_path / "run.csv"))
        assert first == second
        assert (tmp_path / "run.csv").read_text() == first
        assert len(rows(first)) == 2

    def test_gradprobe(self, capsys, tmp_path):
        code, out, _ = run(capsys, "gradprobe", "--models", "1,1,1", "1,1,2,plain", "--seeds", "0", "1",
                           "--epochs", "1", "--count", "64", "--csv", "--out-dir", str(tmp_path))
        assert code == 0
        assert [r["model"] for r in rows(out)] == ["b(1,1,1)-5", "plainnet-8"]

    def test_ksweep(self, capsys):
        _, out, _ = run(capsys, "ksweep", "--d", "12", "--n", "2", "--ks", "2", "--csv")
        assert rows(out)[0]["params_m"] == "13.8"

    def test_config_file_fills_flags(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"d": 4, "n": 4, "ks": [1]}))
        _, out, _ = run(capsys, "ksweep", "--config", str(cfg), "--json")
        assert json.loads(out)[0]["params_m"] == 2.7
        _, out, _ = run(capsys, "ksweep", "--config", str(cfg), "--ks", "3", "--json")
        assert json.loads(out)[0]["params_m"] == 3.7


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["count", "--bogus"])
        assert info.value.code == 2

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 2

    def test_domain_error_single_line(self, capsys):
        code, out, err = run(capsys, "bounds", "--bitnet", "D=7", "K=2", "L=1", "n=2")
        assert code == 1
        assert err.startswith("error: SpecError:") and err.count("\n") == 1

    def test_bad_key_is_usage_error(self, capsys):
        code, _, _ = run(capsys, "bounds", "--bitnet", "D=8", "K=2", "L=1", "q=2")
        assert code == 2

    def test_invalid_architecture(self, capsys):
        code, _, err = run(capsys, "count", "--cifar", "d=1", "k=5", "n=1")
        assert code == 1 and "error:" in err

    def test_console_entry(self):
        proc = subprocess.run([sys.executable, "-m", "bitnet_lab", "depth", "--bitnet34"],
                              capture_output=True, text=True, check=False)
        assert (proc.returncode, proc.stdout.strip()) == (0, "34")
