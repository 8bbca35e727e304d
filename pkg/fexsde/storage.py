import asyncio
import json
import os
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

import aiofiles
import aiofiles.os
from pydantic import BaseModel, ValidationError

from .errors import ArtifactMissingError, ConfigurationError
from .models import RunManifest
from .monitoring import RunLogger

M = TypeVar("M", bound=BaseModel)

MANIFEST_FILE = "manifest.json"


class ArtifactStore:
    """Каталог артефактов одного прогона: {out_dir}/{name}/"""

    def __init__(self, out_dir: str, name: str, software_version: str = "0",
                 logger: Optional[RunLogger] = None):
        self.root = os.path.join(out_dir, name)
        self.name = name
        self.software_version = software_version
        self.manifest_path = os.path.join(self.root, MANIFEST_FILE)
        self.lock = asyncio.Lock()
        self.logger = logger or RunLogger("fexsde.storage")
        self._manifest: Optional[RunManifest] = None

        self._init_dir()

    def _init_dir(self):
        if not os.path.exists(self.root):
            os.makedirs(self.root, exist_ok=True)

    def path(self, filename: str) -> str:
        return os.path.join(self.root, filename)

    def exists(self, filename: str) -> bool:
        return os.path.exists(self.path(filename))

    async def _atomic_write(self, filename: str, data, mode: str):
        target = self.path(filename)
        tmp = f"{target}.tmp"
        async with aiofiles.open(tmp, mode) as f:
            await f.write(data)
        await aiofiles.os.replace(tmp, target)

    async def write_text(self, key: str, filename: str, text: str):
        async with self.lock:
            await self._atomic_write(filename, text, "w")
            (await self._load_manifest()).artifacts[key] = filename

    async def write_bytes(self, key: str, filename: str, data: bytes):
        async with self.lock:
            await self._atomic_write(filename, data, "wb")
            (await self._load_manifest()).artifacts[key] = filename

    async def write_model(self, key: str, filename: str, model: BaseModel):
        await self.write_text(key, filename, json.dumps(model.model_dump(), indent=2, sort_keys=True))

    async def read_text(self, filename: str, command: Optional[str] = None) -> str:
        if not self.exists(filename):
            raise ArtifactMissingError(f"Artifact not found: {self.path(filename)}", command=command)
        async with aiofiles.open(self.path(filename), "r") as f:
            return await f.read()

    async def read_bytes(self, filename: str, command: Optional[str] = None) -> bytes:
        if not self.exists(filename):
            raise ArtifactMissingError(f"Artifact not found: {self.path(filename)}", command=command)
        async with aiofiles.open(self.path(filename), "rb") as f:
            return await f.read()

    async def read_model(self, filename: str, model_cls: Type[M], command: Optional[str] = None) -> M:
        text = await self.read_text(filename, command)
        try:
            return model_cls.model_validate(json.loads(text))
        except (json.JSONDecodeError, ValidationError) as e:
            raise ConfigurationError(f"Malformed {model_cls.get_artifact_name()} file {filename}: {e}") from e

    async def _load_manifest(self) -> RunManifest:
        if self._manifest is None:
            if os.path.exists(self.manifest_path):
                async with aiofiles.open(self.manifest_path, "r") as f:
                    self._manifest = RunManifest.model_validate(json.loads(await f.read()))
            else:
                self._manifest = RunManifest(benchmark=self.name, software_version=self.software_version)
        return self._manifest

    async def manifest(self) -> RunManifest:
        async with self.lock:
            return (await self._load_manifest()).model_copy(deep=True)

    async def forget(self, *keys: str):
        """Убирает артефакты из манифеста и с диска"""
        async with self.lock:
            manifest = await self._load_manifest()
            for key in keys:
                filename = manifest.artifacts.pop(key, None)
                if filename and self.exists(filename):
                    await aiofiles.os.remove(self.path(filename))

    async def commit_manifest(self, timings: Optional[Dict[str, float]] = None, **fields: Any) -> RunManifest:
        """Атомарная запись манифеста по завершении стадии"""
        async with self.lock:
            manifest = await self._load_manifest()
            for name, value in fields.items():
                if isinstance(value, dict):
                    getattr(manifest, name).update(value)
                else:
                    setattr(manifest, name, value)
            if timings:
                manifest.timings.update(timings)
            manifest.software_version = self.software_version
            manifest.updated_at = datetime.now().isoformat()
            await self._atomic_write(MANIFEST_FILE, json.dumps(manifest.model_dump(), indent=2, sort_keys=True), "w")
            return manifest.model_copy(deep=True)


class ArtifactChecker:
    """Проверяет наличие входов каждой команды до начала вычислений"""

    REQUIREMENTS: Dict[str, List[Tuple[str, str]]] = {
        "fit": [("pairs", "generate")],
        "evaluate": [("expression_dim0", "fit")],
    }

    def __init__(self, store: ArtifactStore):
        self.store = store

    async def status(self) -> Dict[str, Any]:
        manifest = await self.store.manifest()
        report = {
            "status": "ok",
            "timestamp": datetime.now().isoformat(),
            "checks": {},
        }
        for key, filename in manifest.artifacts.items():
            present = self.store.exists(filename)
            report["checks"][key] = {"status": "ok" if present else "error", "path": self.store.path(filename)}
            if not present:
                report["status"] = "incomplete"
        return report

    async def check(self, command: str, data_hash: Optional[str] = None, fit_hash: Optional[str] = None):
        manifest = await self.store.manifest()
        for key, producer in self.REQUIREMENTS.get(command, []):
            filename = manifest.artifacts.get(key)
            if filename is None or not self.store.exists(filename):
                raise ArtifactMissingError(f"Missing {key} artifact in {self.store.root}", command=producer)
        if data_hash is not None and manifest.data_hash != data_hash:
            raise ArtifactMissingError(
                f"Dataset in {self.store.root} was generated with a different configuration", command="generate")
        if fit_hash is not None and manifest.fit_hash != fit_hash:
            raise ArtifactMissingError(
                f"Fitted artifacts in {self.store.root} come from a different configuration", command="fit")
