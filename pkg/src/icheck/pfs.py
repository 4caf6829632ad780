"""File-backed parallel-file-system tier.

Layout under ``root``::

    <app_id>/epoch<E>/v<V>/rank<R>/<region_id>.bin
    <app_id>/epoch<E>/v<V>/manifest.json

Data files are written and fsync'd first; the manifest is merged and
renamed into place last. A (rank, region) is on the PFS tier only if the
manifest lists it.
"""

from __future__ import annotations

import fcntl
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional

from .model import CorruptState, RegionMeta, crc32


class PfsTier:
    def __init__(self, root):
        self.root = Path(root)

    def version_dir(self, app_id: int, epoch: int, version: int) -> Path:
        return self.root / str(app_id) / f"epoch{epoch}" / f"v{version}"

    def data_path(self, app_id: int, epoch: int, version: int, rank: int, region_id: str) -> Path:
        return self.version_dir(app_id, epoch, version) / f"rank{rank}" / f"{region_id}.bin"

    def manifest_path(self, app_id: int, epoch: int, version: int) -> Path:
        return self.version_dir(app_id, epoch, version) / "manifest.json"

    @contextmanager
    def _locked(self, vdir: Path):
        vdir.mkdir(parents=True, exist_ok=True)
        with open(vdir / ".lock", "w") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def write_version(
        self,
        app_id: int,
        app_name: str,
        world_size: int,
        epoch: int,
        version: int,
        entries: Iterable,
        before_manifest: Optional[Callable[[], None]] = None,
    ) -> int:
        """Persist ``(rank, RegionMeta, data)`` entries; returns bytes written.

        ``before_manifest`` runs after the data files are durable and before
        the manifest rename (used to inject crashes).
        """
        entries = list(entries)
        vdir = self.version_dir(app_id, epoch, version)
        written = 0
        for rank, meta, data in entries:
            path = self.data_path(app_id, epoch, version, rank, meta.region_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".bin.tmp")
            with open(tmp, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
            written += len(data)
        if before_manifest is not None:
            before_manifest()
        with self._locked(vdir):
            manifest = self.manifest(app_id, epoch, version) or {
                "app_id": app_id,
                "app_name": app_name,
                "world_size": world_size,
                "epoch": epoch,
                "version": version,
                "regions": {},
                "entries": [],
            }
            keep = {(e["rank"], e["region_id"]): e for e in manifest["entries"]}
            for rank, meta, data in entries:
                keep[(rank, meta.region_id)] = {
                    "rank": rank,
                    "region_id": meta.region_id,
                    "length": len(data),
                    "crc32": f"{meta.crc:08x}",
                }
                region = manifest["regions"].setdefault(
                    meta.region_id,
                    {
                        "region_id": meta.region_id,
                        "elem_size": meta.elem_size,
                        "scheme": int(meta.scheme),
                        "total_n": meta.total_n,
                        "count_per_rank": [None] * world_size,
                    },
                )
                region["count_per_rank"][rank] = meta.count
            manifest["entries"] = [keep[k] for k in sorted(keep)]
            tmp = vdir / "manifest.json.tmp"
            with open(tmp, "w") as fh:
                json.dump(manifest, fh, indent=1, sort_keys=True)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.manifest_path(app_id, epoch, version))
            dfd = os.open(vdir, os.O_RDONLY)
            try:
                os.fsync(dfd)
            finally:
                os.close(dfd)
        return written

    def manifest(self, app_id: int, epoch: int, version: int) -> Optional[dict]:
        path = self.manifest_path(app_id, epoch, version)
        try:
            with open(path) as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None

    def entry(self, app_id: int, epoch: int, version: int, rank: int, region_id: str) -> Optional[dict]:
        man = self.manifest(app_id, epoch, version)
        if man is None:
            return None
        for e in man["entries"]:
            if e["rank"] == rank and e["region_id"] == region_id:
                return e
        return None

    def has_rank(self, app_id: int, epoch: int, version: int, rank: int) -> bool:
        man = self.manifest(app_id, epoch, version)
        return man is not None and any(e["rank"] == rank for e in man["entries"])

    def read(self, app_id: int, epoch: int, version: int, rank: int, region_id: str) -> bytes:
        e = self.entry(app_id, epoch, version, rank, region_id)
        if e is None:
            raise FileNotFoundError(f"app {app_id} epoch {epoch} v{version} rank {rank} {region_id!r} not on PFS")
        data = self.data_path(app_id, epoch, version, rank, region_id).read_bytes()
        if len(data) != e["length"] or crc32(data) != int(e["crc32"], 16):
            raise CorruptState(f"PFS copy of rank {rank} {region_id!r} v{version} fails its checksum")
        return data

    def region_meta(self, app_id: int, epoch: int, version: int, rank: int, region_id: str) -> Optional[RegionMeta]:
        man = self.manifest(app_id, epoch, version)
        if man is None:
            return None
        e = self.entry(app_id, epoch, version, rank, region_id)
        if e is None:
            return None
        reg = man["regions"][region_id]
        return RegionMeta(region_id, reg["elem_size"], reg["count_per_rank"][rank], reg["scheme"],
                          reg["total_n"], e["length"], int(e["crc32"], 16))

    def versions(self, app_id: int) -> List[Dict[str, int]]:
        out = []
        base = self.root / str(app_id)
        if not base.is_dir():
            return out
        for edir in sorted(base.glob("epoch*")):
            for vdir in sorted(edir.glob("v*")):
                if (vdir / "manifest.json").exists():
                    out.append({"epoch": int(edir.name[5:]), "version": int(vdir.name[1:])})
        return out
