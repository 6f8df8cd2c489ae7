"""Download and verify the benchmark datasets into a data directory.

Every file is checked against a pinned digest. Files that fail the check
are moved aside with a ``.corrupt`` suffix and never used.

WDBC is written from the copy of the UCI table that ships inside
scikit-learn (same 569 rows and column order), so it needs no network.
Its ``id`` column holds the 1-based row number.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import logging
import shutil
import tempfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

from .data import IDX_FILES, WDBC_FILE

__all__ = ["MANIFEST", "FetchResult", "fetch", "file_digest", "write_wdbc_from_sklearn"]

log = logging.getLogger(__name__)

_MIRRORS = {
    "mnist": [
        "https://ossci-datasets.s3.amazonaws.com/mnist/",
        "http://yann.lecun.com/exdb/mnist/",
    ],
    "fashion": ["http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"],
    "kmnist": ["http://codh.rois.ac.jp/kmnist/dataset/kmnist/"],
}

# Published MD5 digests of the gzip archives as distributed by each project.
_IDX_MD5 = {
    "mnist": {
        "train_images": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
        "train_labels": "d53e105ee54ea40749a09fcbcd1e9432",
        "test_images": "9fb629c4189551a2d022fa330f9573f3",
        "test_labels": "ec29112dd5afa0611ce80d1b7f02629c",
    },
    "fashion": {
        "train_images": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
        "train_labels": "25c81989df183df01b3e8a0aad5dffbe",
        "test_images": "bef4ecab320f06d8554ea6380940ec79",
        "test_labels": "bb300cfdad3c16e7a12a480ee83cd310",
    },
    "kmnist": {
        "train_images": "bdb82020997e1d708af4cf47b453dcf7",
        "train_labels": "e144d726b3acfaa3e44228e80efcd344",
        "test_images": "5c965bf0a639b31b8f53240b1b52f4d7",
        "test_labels": "7320c461ea6c1c855c0b718fb2a4b134",
    },
}

WDBC_SHA256 = "a906fc5c0c27c1ff5abb84df814dd29743c24a7eedd6cac902d2b68a171cf41d"


@dataclass(frozen=True)
class ManifestEntry:
    filename: str
    algorithm: str
    digest: str
    urls: tuple[str, ...] = ()


def _build_manifest() -> dict[str, list[ManifestEntry]]:
    manifest = {}
    for name, digests in _IDX_MD5.items():
        entries = []
        for key, md5 in digests.items():
            fname = IDX_FILES[key] + ".gz"
            entries.append(ManifestEntry(fname, "md5", md5, tuple(m + fname for m in _MIRRORS[name])))
        manifest[name] = entries
    manifest["wdbc"] = [ManifestEntry(WDBC_FILE, "sha256", WDBC_SHA256)]
    return manifest


MANIFEST = _build_manifest()


@dataclass
class FetchResult:
    dataset: str
    filename: str
    status: str  # "present", "fetched", "corrupt" or "failed"
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("present", "fetched")


def file_digest(path, algorithm: str) -> str:
    h = hashlib.new(algorithm)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_wdbc_from_sklearn(path) -> None:
    """Write the UCI ``wdbc.data`` layout from scikit-learn's bundled table.

    The bundled table encodes malignant as 0, so target 0 becomes ``M``.
    Feature strings are copied verbatim to keep the output byte-stable.
    """
    text = importlib.resources.files("sklearn.datasets").joinpath("data/breast_cancer.csv").read_text()
    rows = []
    for i, line in enumerate(text.splitlines()[1:], start=1):
        parts = line.split(",")
        rows.append(",".join([str(i), "M" if parts[-1] == "0" else "B", *parts[:-1]]))
    Path(path).write_text("\n".join(rows) + "\n")


def _download(urls, dest: Path, timeout: float) -> str:
    errors = []
    for url in urls:
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp, open(dest, "wb") as out:
                shutil.copyfileobj(resp, out)
            return url
        except OSError as exc:
            errors.append(f"{url}: {exc}")
    raise OSError("; ".join(errors) or "no download source")


def _acquire(name: str, entry: ManifestEntry, target: Path, timeout: float) -> FetchResult:
    with tempfile.TemporaryDirectory(dir=target.parent) as tmpdir:
        tmp = Path(tmpdir) / entry.filename
        try:
            if name == "wdbc":
                write_wdbc_from_sklearn(tmp)
                source = "scikit-learn bundled copy"
            else:
                source = _download(entry.urls, tmp, timeout)
        except OSError as exc:
            return FetchResult(name, entry.filename, "failed", str(exc))
        got = file_digest(tmp, entry.algorithm)
        if got != entry.digest:
            return FetchResult(
                name, entry.filename, "failed", f"{entry.algorithm} {got} from {source} != pinned {entry.digest}"
            )
        tmp.replace(target)
    return FetchResult(name, entry.filename, "fetched", source)


def fetch(datasets, data_dir, timeout: float = 60.0) -> list[FetchResult]:
    """Ensure every manifest file of ``datasets`` is present and verified.

    Existing valid files are left untouched. An existing file with the wrong
    digest is renamed to ``<name>.corrupt`` and reported; it is not replaced
    in the same call.
    """
    results = []
    for name in datasets:
        if name not in MANIFEST:
            raise ValueError(f"unknown dataset {name!r}; choose from {sorted(MANIFEST)}")
        folder = Path(data_dir) / name
        folder.mkdir(parents=True, exist_ok=True)
        for entry in MANIFEST[name]:
            target = folder / entry.filename
            if target.exists():
                got = file_digest(target, entry.algorithm)
                if got == entry.digest:
                    results.append(FetchResult(name, entry.filename, "present"))
                    continue
                quarantine = target.with_name(target.name + ".corrupt")
                target.replace(quarantine)
                log.error("%s failed verification; moved to %s", target, quarantine)
                results.append(
                    FetchResult(name, entry.filename, "corrupt", f"{entry.algorithm} {got}; moved to {quarantine.name}")
                )
                continue
            results.append(_acquire(name, entry, target, timeout))
    return results
