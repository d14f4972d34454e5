"""ZIP model: round trips, determinism, digests, validation."""

import io
import struct
import zipfile

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apkprobe.archive import (
    DEFLATED,
    STORED,
    ApkArchive,
    ZipEntry,
    compare_entries,
    compute_digests,
    open_archive,
    write_archive,
)
from apkprobe.errors import FormatError, ValidationError


def zipfile_bytes(entries, compression=zipfile.ZIP_DEFLATED):
    """Independent writer: the stdlib zipfile module."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression) as z:
        for name, data in entries:
            z.writestr(name, data)
    return buf.getvalue()


EMPTY_EOCD = b"PK\x05\x06" + b"\x00" * 18


def test_empty_zip_has_zero_entries():
    archive = open_archive(EMPTY_EOCD)
    assert archive.entries == []


def test_empty_archive_writes_22_byte_eocd():
    assert write_archive(ApkArchive()) == EMPTY_EOCD


def test_fixture_preserves_entry_order():
    data = zipfile_bytes([("AndroidManifest.xml", b"axml"),
                          ("classes.dex", b"dex")])
    archive = open_archive(data)
    assert archive.paths() == ["AndroidManifest.xml", "classes.dex"]


@pytest.mark.parametrize("compression", [zipfile.ZIP_STORED, zipfile.ZIP_DEFLATED])
def test_round_trip_zipfile_fixture(compression):
    data = zipfile_bytes([("a/b.txt", b"hello"), ("c.bin", bytes(range(256)) * 10),
                          ("empty", b"")], compression)
    assert write_archive(open_archive(data)) == data


def test_round_trip_own_output():
    archive = ApkArchive([ZipEntry("x.txt", b"abc"),
                          ZipEntry("y.bin", b"\x00" * 100, STORED)])
    data = write_archive(archive)
    assert write_archive(open_archive(data)) == data


def test_write_is_deterministic():
    archive = ApkArchive([ZipEntry("a", b"one"), ZipEntry("b", b"two", STORED)])
    assert write_archive(archive) == write_archive(archive)


def test_modify_one_entry_touches_only_its_records():
    data = zipfile_bytes([("keep.txt", b"keep me"), ("change.txt", b"old")])
    original = open_archive(data)
    changed = original.with_entry("change.txt", b"new")
    out = write_archive(changed)
    reread = open_archive(out)
    assert reread.read("keep.txt") == b"keep me"
    assert reread.read("change.txt") == b"new"
    # the untouched entry's raw local record survives byte-identically
    keep_before = data[data.find(b"keep.txt") - 30:data.find(b"keep.txt") + 20]
    assert keep_before in out


def test_duplicate_paths_rejected():
    data = zipfile_bytes([("same.txt", b"one")])
    # graft a duplicate central record count by writing two same-named files
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as z:
        z.writestr("same.txt", b"one")
        with pytest.warns(UserWarning):
            z.writestr("same.txt", b"two")
    with pytest.raises(ValidationError):
        open_archive(buf.getvalue())
    assert open_archive(data).read("same.txt") == b"one"


def test_malformed_central_directory_names_offset():
    data = bytearray(zipfile_bytes([("a.txt", b"data")]))
    cd_off = struct.unpack_from("<I", data, len(data) - 6)[0]
    data[cd_off] = 0x00  # break the central signature
    with pytest.raises(FormatError) as err:
        open_archive(bytes(data))
    assert "0x%x" % cd_off in str(err.value)


def test_truncated_input_rejected():
    with pytest.raises(FormatError):
        open_archive(b"PK\x03\x04 not a real zip")


def test_path_traversal_rejected_on_write():
    archive = ApkArchive([ZipEntry("ok.txt", b"x")])
    bad = ApkArchive([ZipEntry("a/../../evil", b"x")])
    write_archive(archive)
    with pytest.raises(ValidationError):
        write_archive(bad)


def test_compute_digests_known_answers():
    empty = compute_digests(b"")
    assert empty.sha256 == ("e3b0c44298fc1c149afbf4c8996fb924"
                            "27ae41e4649b934ca495991b7852b855")
    assert empty.md5 == "d41d8cd98f00b204e9800998ecf8427e"
    assert compute_digests(b"abc").sha1 == \
        "a9993e364706816aba3e25717850c26c9cd0d89d"


def test_digests_are_pure():
    a = compute_digests(b"same bytes")
    b = compute_digests(b"same bytes")
    assert a == b


def test_entry_updates_are_pure():
    base = ApkArchive([ZipEntry("a", b"1")])
    touched = base.with_entry("b", b"2")
    assert base.paths() == ["a"]
    assert touched.paths() == ["a", "b"]
    assert touched.without(["a"]).paths() == ["b"]
    assert base.paths() == ["a"]


def test_compare_entries():
    before = ApkArchive([ZipEntry("keep", b"k"), ZipEntry("mod", b"1"),
                         ZipEntry("gone", b"g")])
    after = ApkArchive([ZipEntry("keep", b"k"), ZipEntry("mod", b"2"),
                        ZipEntry("new", b"n")])
    assert compare_entries(before, after) == (["new"], ["gone"], ["mod"])


def test_fake_eocd_inside_comment():
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as z:
        z.writestr("real.txt", b"real data")
        z.comment = b"decoy " + b"PK\x05\x06" + b"\x00" * 10 + b" tail"
    data = buf.getvalue()
    archive = open_archive(data)
    assert archive.read("real.txt") == b"real data"
    assert archive.comment == b"decoy " + b"PK\x05\x06" + b"\x00" * 10 + b" tail"
    assert write_archive(archive) == data


entry_names = st.lists(
    st.text(alphabet="abcdefgh/.-_", min_size=1, max_size=12).filter(
        lambda s: ".." not in s and not s.startswith("/") and not s.endswith("/")),
    min_size=0, max_size=8, unique=True)


@settings(max_examples=40, deadline=None)
@given(names=entry_names, payload=st.binary(max_size=400),
       stored=st.booleans())
def test_round_trip_property(names, payload, stored):
    mode = STORED if stored else DEFLATED
    archive = ApkArchive([ZipEntry(n, payload + n.encode(), mode)
                          for n in names])
    data = write_archive(archive)
    again = open_archive(data)
    assert again.paths() == archive.paths()
    assert write_archive(again) == data
    assert again.entry_map() == archive.entry_map()
