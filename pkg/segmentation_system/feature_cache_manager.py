"""
特征缓存管理器 - FeatureCacheManager

把提取好的特征按 (检查点哈希, 图像编号, 时间步, 解码块, clean_input, 种子) 存成 .npz，
文件内带一个JSON头（形状、dtype、来源），读回时校验头与请求一致。
"""

import io
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Union

import numpy as np
import torch
from loguru import logger

from errors import ArtifactError
from utils import atomic_write_bytes, sha256_text

from .feature_extractor import FeatureStack

CACHE_VERSION = 1


class FeatureCacheManager:
    """磁盘特征缓存"""

    def __init__(self, cache_dir: Union[str, Path]):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.cache_stats = {"hits": 0, "misses": 0, "writes": 0}

    @staticmethod
    def make_key(checkpoint_id: str, image_id: str, timesteps: Sequence[int],
                 blocks: Iterable[int], clean_input: bool = False, seed: int = 0) -> str:
        header = json.dumps({
            "seed": int(seed),
            "checkpoint": checkpoint_id,
            "image": image_id,
            "timesteps": [int(t) for t in timesteps],
            "blocks": sorted(int(b) for b in blocks),
            "clean_input": bool(clean_input),
        }, sort_keys=True)
        return sha256_text(header)

    def entry_path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.npz"

    def get(self, checkpoint_id: str, image_id: str, timesteps: Sequence[int],
            blocks: Iterable[int], clean_input: bool = False, seed: int = 0) -> Optional[FeatureStack]:
        """命中返回 FeatureStack，未命中返回 None"""
        key = self.make_key(checkpoint_id, image_id, timesteps, blocks, clean_input, seed)
        path = self.entry_path(key)
        if not path.is_file():
            self.cache_stats["misses"] += 1
            return None
        try:
            with np.load(path, allow_pickle=False) as archive:
                header = json.loads(str(archive["header"]))
                data = archive["data"]
        except (OSError, ValueError, KeyError) as e:
            raise ArtifactError(f"特征缓存损坏: {e}", path=str(path)) from e
        if header.get("key") != key or list(data.shape) != header.get("shape"):
            raise ArtifactError("特征缓存头与内容不一致", path=str(path))

        self.cache_stats["hits"] += 1
        provenance = header["provenance"]
        return FeatureStack(
            data=torch.from_numpy(data),
            checkpoint_id=provenance["checkpoint_id"],
            timesteps=tuple(provenance["timesteps"]),
            blocks=tuple(provenance["blocks"]),
            channels_per_block={int(k): v for k, v in header.get("channels_per_block", {}).items()},
        )

    def put(self, stack: FeatureStack, image_id: str, clean_input: bool = False, seed: int = 0) -> Path:
        key = self.make_key(stack.checkpoint_id, image_id, stack.timesteps, stack.blocks, clean_input, seed)
        data = stack.data.detach().cpu().numpy()
        header = {
            "version": CACHE_VERSION,
            "key": key,
            "image_id": image_id,
            "shape": list(data.shape),
            "dtype": str(data.dtype),
            "clean_input": clean_input,
            "seed": seed,
            "provenance": stack.provenance(),
            "channels_per_block": {str(k): v for k, v in stack.channels_per_block.items()},
        }
        buffer = io.BytesIO()
        np.savez(buffer, header=np.array(json.dumps(header)), data=data)
        path = atomic_write_bytes(self.entry_path(key), buffer.getvalue())
        self.cache_stats["writes"] += 1
        return path

    def clear(self) -> int:
        """删除全部缓存文件，返回删除个数"""
        removed = 0
        for path in self.cache_dir.rglob("*.npz"):
            path.unlink()
            removed += 1
        self.cache_stats = {"hits": 0, "misses": 0, "writes": 0}
        logger.info(f"特征缓存已清空 {self.cache_dir}: {removed} 个文件")
        return removed

    def stats(self) -> Dict[str, Any]:
        files = list(self.cache_dir.rglob("*.npz"))
        requests = self.cache_stats["hits"] + self.cache_stats["misses"]
        return {
            **self.cache_stats,
            "entries": len(files),
            "size_bytes": sum(p.stat().st_size for p in files),
            "hit_ratio": self.cache_stats["hits"] / requests if requests else 0.0,
        }
