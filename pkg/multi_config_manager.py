#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
多配置管理器 - 扫描 configs/ 下的预设配置，供命令行和交互菜单选择
"""

import glob
import json
import os
from typing import Any, Dict, List, Optional

from loguru import logger

from utils import safe_list_input


class MultiConfigManager:
    """预设配置管理器"""

    def __init__(self, config_dir: str = "configs"):
        self.config_dir = config_dir
        self.available_configs: Dict[str, Dict[str, Any]] = {}
        self.scan_available_configs()

    def scan_available_configs(self) -> Dict[str, Dict[str, Any]]:
        """扫描 *_config.json 预设，预设名为去掉 _config 后缀的文件名"""
        self.available_configs = {}
        config_files = sorted(glob.glob(os.path.join(self.config_dir, "*_config.json")))

        for config_file in config_files:
            try:
                with open(config_file, 'r', encoding='utf-8') as f:
                    config_data = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                logger.warning(f"加载预设失败 {config_file}: {e}")
                continue

            preset_name = os.path.basename(config_file)[:-len("_config.json")]
            pretrain = config_data.get('pretrain', {})
            self.available_configs[preset_name] = {
                'path': config_file,
                'run_name': config_data.get('run_name', preset_name),
                'description': config_data.get('description', '无描述'),
                'method': pretrain.get('method', 'mdm'),
                'config_data': config_data,
            }

        logger.debug(f"发现 {len(self.available_configs)} 个预设: {list(self.available_configs)}")
        return self.available_configs

    def load_config(self, preset_name: str) -> Optional[Dict[str, Any]]:
        """返回预设的原始字典，不存在时返回None"""
        info = self.available_configs.get(preset_name)
        if info is None:
            logger.warning(f"预设不存在: {preset_name}")
            return None
        return info['config_data']

    def interactive_preset_selection(self) -> Optional[str]:
        """交互式选择一个预设"""
        if not self.available_configs:
            print("❌ 没有发现可用的预设配置")
            return None

        print("\n🎯 可用的预设配置:")
        print("=" * 60)
        choices = []
        for preset_name, info in self.available_configs.items():
            choices.append((f"{preset_name} [{info['method']}] - {info['description']}", preset_name))
        choices.append(("↩️  使用默认配置", None))
        return safe_list_input("选择预设 (ESC返回)", choices=choices)

    def print_config_table(self) -> None:
        """打印预设一览"""
        print(f"\n{'预设':<16}{'方法':<8}说明")
        print("-" * 60)
        for preset_name, info in self.available_configs.items():
            print(f"{preset_name:<16}{info['method']:<8}{info['description']}")
