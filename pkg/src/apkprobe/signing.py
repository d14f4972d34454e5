"""JAR-style (v1) APK signing: identities, signing, stripping, verification.

The signature scheme is the classic three-file layout under META-INF/:

* ``MANIFEST.MF``  - one SHA-256 digest attribute per non-META-INF entry
* ``<ALIAS>.SF``   - digests of the manifest and of its per-entry sections
* ``<ALIAS>.RSA``  - DER PKCS#7 detached signature over the .SF bytes

Signatures are produced without authenticated attributes, so the RSA
signature covers the .SF bytes directly and the whole output is
deterministic for a fixed identity. Whole-file signing blocks (v2/v3) are
out of scope.
"""

from __future__ import annotations

import base64
import datetime
import hashlib
import random
import re
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import gmpy2
from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.serialization import pkcs7
from cryptography.x509.oid import NameOID

from .archive import ApkArchive
from .errors import ApkProbeError, FormatError, ValidationError

SELF_SIGNED = "self-signed"
WELL_KNOWN_STANDIN = "well-known-standin"

_MANIFEST_PATH = "META-INF/MANIFEST.MF"
_SIGNATURE_EXTS = (".MF", ".SF", ".RSA", ".DSA", ".EC")
_STANDIN_SEED = 0x41505053  # fixed so the shipped fixture can be regenerated

_WRAP = 70  # max physical line length in manifest files, in bytes


class SigningError(ApkProbeError):
    """Signing self-check failed; the produced archive would not verify."""


@dataclass(frozen=True)
class SigningIdentity:
    """An RSA key pair plus its self-signed certificate."""

    private_key: rsa.RSAPrivateKey
    certificate: x509.Certificate
    kind: str
    label: str

    @property
    def alias(self) -> str:
        """Signature file alias derived from the label, JAR-style."""
        cleaned = re.sub(r"[^A-Za-z0-9]", "", self.label).upper()[:8]
        return cleaned or "CERT"

    def fingerprint(self) -> str:
        return cert_fingerprint(self.certificate)


def cert_fingerprint(certificate: x509.Certificate) -> str:
    """Lowercase hex SHA-256 of the certificate's DER encoding."""
    der = certificate.public_bytes(serialization.Encoding.DER)
    return hashlib.sha256(der).hexdigest()


class SeededIdentityFactory:
    """Deterministic identity generation for reproducible pipelines.

    Primes are drawn from a seeded PRNG, so the same seed and label sequence
    always yields the same keys and certificates. Test/measurement use only;
    keys made this way must never protect anything real.
    """

    def __init__(self, seed: int):
        self._rng = random.Random(seed)

    def identity(self, label: str, kind: str = SELF_SIGNED) -> SigningIdentity:
        key = _rsa_from_rng(self._rng)
        cert = _self_signed_cert(key, label, serial=self._rng.getrandbits(63) | 1)
        return SigningIdentity(key, cert, kind, label)


def generate_identity(kind: str, label: Optional[str] = None) -> SigningIdentity:
    """Create a fresh self-signed identity or load the shipped stand-in.

    The stand-in plays the role of a widely reused platform key. It is a
    fixture generated for this repository; it is not a real platform key.
    """
    if kind == SELF_SIGNED:
        label = label or "probe-self"
        key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
        cert = _self_signed_cert(key, label,
                                 serial=x509.random_serial_number())
        return SigningIdentity(key, cert, SELF_SIGNED, label)
    if kind == WELL_KNOWN_STANDIN:
        return _load_standin()
    raise ValidationError("unknown identity kind %r" % kind)


def save_identity(identity: SigningIdentity, key_path, cert_path) -> None:
    key_path.write_bytes(identity.private_key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption()))
    cert_path.write_bytes(
        identity.certificate.public_bytes(serialization.Encoding.PEM))


def load_identity(key_pem: bytes, cert_pem: bytes, kind: str,
                  label: str) -> SigningIdentity:
    key = serialization.load_pem_private_key(key_pem, password=None)
    cert = x509.load_pem_x509_certificate(cert_pem)
    return SigningIdentity(key, cert, kind, label)


# -- archive-level operations ----------------------------------------------

def is_signature_path(path: str) -> bool:
    if not path.startswith("META-INF/"):
        return False
    upper = path.upper()
    return any(upper.endswith(ext) for ext in _SIGNATURE_EXTS)


def strip_signature(archive: ApkArchive) -> ApkArchive:
    """Remove all v1 signature files; idempotent on unsigned archives."""
    return archive.filtered(lambda p: not is_signature_path(p))


def sign_v1(archive: ApkArchive, identity: SigningIdentity) -> ApkArchive:
    """Add MANIFEST.MF / .SF / .RSA covering every non-META-INF entry."""
    for path in archive.paths():
        if is_signature_path(path):
            raise ValidationError(
                "archive already carries a signature (%s); strip first" % path)

    covered = [e for e in archive.entries if not e.path.startswith("META-INF/")]
    manifest = _build_manifest(covered)
    sf = _build_signature_file(manifest)
    block = pkcs7.PKCS7SignatureBuilder().set_data(sf).add_signer(
        identity.certificate, identity.private_key, hashes.SHA256(),
    ).sign(serialization.Encoding.DER,
           [pkcs7.PKCS7Options.DetachedSignature,
            pkcs7.PKCS7Options.NoAttributes])

    signed = archive.with_entry(_MANIFEST_PATH, manifest)
    signed = signed.with_entry("META-INF/%s.SF" % identity.alias, sf)
    signed = signed.with_entry("META-INF/%s.RSA" % identity.alias, block)

    check = verify_v1(signed)
    if check.state != "valid":
        raise SigningError("self-check after signing failed: %s" % check.reason)
    return signed


@dataclass(frozen=True)
class VerificationResult:
    state: str  # "valid" | "invalid" | "unsigned"
    reason: Optional[str] = None
    certificate: Optional[x509.Certificate] = None

    def __bool__(self):
        return self.state == "valid"


def verify_v1(archive: ApkArchive) -> VerificationResult:
    """Check entry digests, .SF digests, and the PKCS#7 signature."""
    manifest_entry = archive.get(_MANIFEST_PATH)
    sf_entries = [e for e in archive.entries
                  if e.path.startswith("META-INF/") and e.path.upper().endswith(".SF")]
    if manifest_entry is None and not sf_entries:
        return VerificationResult("unsigned")
    if manifest_entry is None or not sf_entries:
        return VerificationResult("invalid", "incomplete signature file set")

    try:
        main_attrs, sections = _parse_manifest(manifest_entry.data)
    except FormatError as exc:
        return VerificationResult("invalid", "manifest: %s" % exc)

    listed = {name: attrs for name, attrs in sections}
    for entry in archive.entries:
        if entry.path.startswith("META-INF/"):
            continue
        attrs = listed.pop(entry.path, None)
        if attrs is None or "SHA-256-Digest" not in attrs:
            return VerificationResult("invalid", "unlisted entry: %s" % entry.path)
        expected = base64.b64encode(hashlib.sha256(entry.data).digest()).decode()
        if attrs["SHA-256-Digest"] != expected:
            return VerificationResult("invalid", "entry digest: %s" % entry.path)
    if listed:
        missing = sorted(listed)[0]
        return VerificationResult("invalid", "missing entry: %s" % missing)

    sf_entry = sf_entries[0]
    alias = sf_entry.path[len("META-INF/"):-3]
    block_entry = None
    for ext in (".RSA", ".DSA", ".EC"):
        block_entry = archive.get("META-INF/%s%s" % (alias, ext))
        if block_entry is not None:
            break
    if block_entry is None:
        return VerificationResult("invalid", "no signature block for %s" % alias)

    try:
        sf_main, sf_sections = _parse_manifest(sf_entry.data)
    except FormatError as exc:
        return VerificationResult("invalid", "signature file: %s" % exc)

    manifest_digest = base64.b64encode(
        hashlib.sha256(manifest_entry.data).digest()).decode()
    if sf_main.get("SHA-256-Digest-Manifest") != manifest_digest:
        return VerificationResult("invalid", "manifest digest mismatch")

    section_digests = _manifest_section_digests(manifest_entry.data)
    for name, attrs in sf_sections:
        expected = section_digests.get(name)
        if expected is None or attrs.get("SHA-256-Digest") != expected:
            return VerificationResult("invalid", "section digest: %s" % name)

    try:
        certs = pkcs7.load_der_pkcs7_certificates(block_entry.data)
        if not certs:
            return VerificationResult("invalid", "signature block has no certificate")
        cert = certs[0]
        signature = _extract_pkcs7_signature(block_entry.data)
        cert.public_key().verify(signature, sf_entry.data,
                                 padding.PKCS1v15(), hashes.SHA256())
    except Exception as exc:  # noqa: BLE001 - any crypto failure means invalid
        return VerificationResult("invalid", "signature verification failed: %s" % exc)

    return VerificationResult("valid", certificate=cert)


# -- manifest text format ----------------------------------------------------

def _wrap_line(line: bytes) -> bytes:
    if len(line) <= _WRAP:
        return line + b"\r\n"
    out = line[:_WRAP] + b"\r\n"
    rest = line[_WRAP:]
    while rest:
        chunk, rest = rest[:_WRAP - 1], rest[_WRAP - 1:]
        out += b" " + chunk + b"\r\n"
    return out


def _attr(key: str, value: str) -> bytes:
    return _wrap_line(("%s: %s" % (key, value)).encode("utf-8"))


def _entry_section(entry) -> bytes:
    digest = base64.b64encode(hashlib.sha256(entry.data).digest()).decode()
    return _attr("Name", entry.path) + _attr("SHA-256-Digest", digest) + b"\r\n"


def _build_manifest(entries) -> bytes:
    out = _attr("Manifest-Version", "1.0")
    out += _attr("Created-By", "apkprobe")
    out += b"\r\n"
    for entry in entries:
        out += _entry_section(entry)
    return out


def _build_signature_file(manifest: bytes) -> bytes:
    main = _main_section_bytes(manifest)
    out = _attr("Signature-Version", "1.0")
    out += _attr("Created-By", "apkprobe")
    out += _attr("SHA-256-Digest-Manifest",
                 base64.b64encode(hashlib.sha256(manifest).digest()).decode())
    out += _attr("SHA-256-Digest-Manifest-Main-Attributes",
                 base64.b64encode(hashlib.sha256(main).digest()).decode())
    out += b"\r\n"
    for name, section in _manifest_sections(manifest):
        digest = base64.b64encode(hashlib.sha256(section).digest()).decode()
        out += _attr("Name", name) + _attr("SHA-256-Digest", digest) + b"\r\n"
    return out


def _split_sections(data: bytes):
    """Split manifest bytes into raw sections, each ending with a blank line."""
    sections = []
    start = 0
    text = data
    while start < len(text):
        for sep in (b"\r\n\r\n", b"\n\n"):
            idx = text.find(sep, start)
            if idx != -1:
                sections.append(text[start:idx + len(sep)])
                start = idx + len(sep)
                break
        else:
            sections.append(text[start:])
            break
    return [s for s in sections if s.strip()]


def _unwrap_attrs(section: bytes) -> dict:
    lines = []
    for raw in section.replace(b"\r\n", b"\n").split(b"\n"):
        if not raw:
            continue
        if raw.startswith(b" ") and lines:
            lines[-1] += raw[1:]
        else:
            lines.append(raw)
    attrs = {}
    for line in lines:
        if b":" not in line:
            raise FormatError("manifest line without separator: %r" % line)
        key, _, value = line.partition(b":")
        attrs[key.decode("utf-8").strip()] = value.decode("utf-8").strip()
    return attrs


def _parse_manifest(data: bytes):
    sections = _split_sections(data)
    if not sections:
        raise FormatError("empty manifest")
    main = _unwrap_attrs(sections[0])
    named = []
    for raw in sections[1:]:
        attrs = _unwrap_attrs(raw)
        name = attrs.get("Name")
        if name is None:
            raise FormatError("manifest section without Name attribute")
        named.append((name, attrs))
    return main, named


def _main_section_bytes(manifest: bytes) -> bytes:
    return _split_sections(manifest)[0]


def _manifest_sections(manifest: bytes):
    for raw in _split_sections(manifest)[1:]:
        name = _unwrap_attrs(raw).get("Name")
        if name is not None:
            yield name, raw


def _manifest_section_digests(manifest: bytes) -> dict:
    return {
        name: base64.b64encode(hashlib.sha256(section).digest()).decode()
        for name, section in _manifest_sections(manifest)
    }


# -- PKCS#7 DER helpers ------------------------------------------------------

def _der_children(buf: bytes, start: int, end: int):
    out = []
    pos = start
    while pos < end:
        if pos + 2 > end:
            raise FormatError("truncated DER element", pos)
        tag = buf[pos]
        length = buf[pos + 1]
        head = pos + 2
        if length & 0x80:
            n = length & 0x7F
            length = int.from_bytes(buf[head:head + n], "big")
            head += n
        if head + length > end:
            raise FormatError("DER element extends past parent", pos)
        out.append((tag, head, head + length))
        pos = head + length
    return out


def _extract_pkcs7_signature(block: bytes) -> bytes:
    """Pull the signer's encryptedDigest out of a SignedData structure."""
    content_info = _der_children(block, 0, len(block))
    if not content_info or content_info[0][0] != 0x30:
        raise FormatError("not a DER SEQUENCE")
    ci = _der_children(block, *content_info[0][1:])
    explicit = [c for c in ci if c[0] == 0xA0]
    if not explicit:
        raise FormatError("no SignedData content")
    signed_data = _der_children(block, *explicit[0][1:])[0]
    sd = _der_children(block, *signed_data[1:])
    signer_infos = [c for c in sd if c[0] == 0x31][-1]
    first_signer = _der_children(block, *signer_infos[1:])[0]
    si = _der_children(block, *first_signer[1:])
    octet_strings = [c for c in si if c[0] == 0x04]
    if not octet_strings:
        raise FormatError("no encryptedDigest in SignerInfo")
    start, stop = octet_strings[-1][1], octet_strings[-1][2]
    return block[start:stop]


# -- identity internals ------------------------------------------------------

def _rsa_from_rng(rng: random.Random, bits: int = 2048) -> rsa.RSAPrivateKey:
    half = bits // 2

    def draw_prime():
        while True:
            cand = rng.getrandbits(half) | (1 << (half - 1)) | (1 << (half - 2)) | 1
            p = int(gmpy2.next_prime(cand))
            if p.bit_length() == half:
                return p

    e = 65537
    p, q = draw_prime(), draw_prime()
    if p < q:
        p, q = q, p
    n = p * q
    d = int(gmpy2.invert(e, (p - 1) * (q - 1)))
    numbers = rsa.RSAPrivateNumbers(
        p=p, q=q, d=d,
        dmp1=d % (p - 1), dmq1=d % (q - 1),
        iqmp=int(gmpy2.invert(q, p)),
        public_numbers=rsa.RSAPublicNumbers(e, n))
    return numbers.private_key()


def _self_signed_cert(key: rsa.RSAPrivateKey, common_name: str,
                      serial: int) -> x509.Certificate:
    name = x509.Name([
        x509.NameAttribute(NameOID.COMMON_NAME, common_name),
        x509.NameAttribute(NameOID.ORGANIZATION_NAME, "apkprobe"),
    ])
    return (x509.CertificateBuilder()
            .subject_name(name)
            .issuer_name(name)
            .public_key(key.public_key())
            .serial_number(serial)
            .not_valid_before(datetime.datetime(2020, 1, 1))
            .not_valid_after(datetime.datetime(2040, 1, 1))
            .sign(key, hashes.SHA256()))


def _load_standin() -> SigningIdentity:
    data_dir = resources.files("apkprobe.data")
    key_pem = (data_dir / "standin_key.pem").read_bytes()
    cert_pem = (data_dir / "standin_cert.pem").read_bytes()
    return load_identity(key_pem, cert_pem, WELL_KNOWN_STANDIN, "platform-standin")
