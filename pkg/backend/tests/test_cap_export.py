"""
test_cap_export.py
Component files, CAP archives and the build manifest
"""
import orjson
import pytest

from app.core.exceptions import ArtifactWriteError
from app.models.cap import ComponentBinary, ComponentKind
from app.services.cap_export import export_cap_artifact, read_cap_archive, write_manifest


def test_component_files_and_archive(tmp_path, caps):
    cap = caps["sample"]
    written = export_cap_artifact(cap, tmp_path)

    assert written[-1] == tmp_path / "sample.cap"
    assert written[0] == tmp_path / "sample" / "javacard" / "Header.cap"
    assert len(written) == len(cap.components) + 1
    header = ComponentBinary.from_bytes(written[0].read_bytes())
    assert header == cap.get(ComponentKind.HEADER)


def test_archive_members_match_components(tmp_path, caps):
    cap = caps["com.acme.util"]
    export_cap_artifact(cap, tmp_path)
    members = read_cap_archive(tmp_path / "com.acme.util.cap")
    assert set(members) == {c.kind.file_name for c in cap.ordered()}
    assert "Applet" not in members
    for component in cap.ordered():
        assert members[component.kind.file_name] == component.to_bytes()
    assert (tmp_path / "com" / "acme" / "util" / "javacard" / "Export.cap").exists()


def test_archive_is_reproducible(tmp_path, caps):
    cap = caps["com.acme.wallet"]
    export_cap_artifact(cap, tmp_path / "a")
    export_cap_artifact(cap, tmp_path / "b")
    first = (tmp_path / "a" / "com.acme.wallet.cap").read_bytes()
    assert first == (tmp_path / "b" / "com.acme.wallet.cap").read_bytes()


def test_manifest_lines(tmp_path, caps):
    path = write_manifest([caps["com.acme.wallet"], caps["sample"]], tmp_path / "cap" / "manifest.jsonl")
    lines = path.read_bytes().splitlines()
    assert len(lines) == 2
    wallet, sample = (orjson.loads(line) for line in lines)
    assert wallet["package"] == "com.acme.wallet"
    assert wallet["aid"] == "A00000015103"
    assert wallet["bcv_expected"] is True
    assert sample["bcv_expected"] is False
    assert sample["components"]["Method"] == 74
    assert list(wallet) == sorted(wallet)


def test_manifest_append(tmp_path, caps):
    path = tmp_path / "manifest.jsonl"
    write_manifest([caps["com.acme.util"]], path)
    write_manifest([caps["com.acme.crypto"]], path, append=True)
    packages = [orjson.loads(line)["package"] for line in path.read_bytes().splitlines()]
    assert packages == ["com.acme.util", "com.acme.crypto"]


def test_unwritable_output(tmp_path, caps):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    with pytest.raises(ArtifactWriteError) as exc:
        export_cap_artifact(caps["sample"], blocker)
    assert str(blocker) in str(exc.value)
    assert exc.value.exit_code == 1
