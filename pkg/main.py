#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
掩码扩散表征工具 - 主入口文件

子命令：synth-data / pretrain / train-seg / eval / ablate / robustness / reconstruct / cluster
不带子命令运行时进入交互菜单。
"""

import argparse
import json
import signal
import sys
import traceback
from typing import Any, Dict, List, Optional

from config import ConfigManager
from errors import MDMError
from menu_handlers import (
    COMMANDS,
    cmd_ablate,
    cmd_cluster,
    cmd_eval,
    cmd_pretrain,
    cmd_reconstruct,
    cmd_robustness,
    cmd_synth_data,
    cmd_train_seg,
)
from utils import parse_int_list, safe_list_input, safe_text_input, signal_handler

EXIT_OK, EXIT_UNEXPECTED, EXIT_MDM_ERROR = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="掩码扩散模型自监督预训练与小样本分割")
    sub = parser.add_subparsers(dest="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="预设名 (configs/<name>_config.json) 或配置文件路径")
    common.add_argument("--seed", type=int, help="覆盖全局随机种子")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="覆盖配置项，可重复")

    sub.add_parser("synth-data", parents=[common], help="生成合成形状数据集")

    p = sub.add_parser("pretrain", parents=[common], help="自监督预训练")
    p.add_argument("--resume", help="从训练检查点续训")

    for name, text in (("train-seg", "训练分割头并评估"), ("eval", "用已保存的分割头评估"),
                       ("robustness", "退化鲁棒性评估"), ("reconstruct", "重建预览"),
                       ("cluster", "特征k-means")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="预训练检查点（默认取本运行的 pretrain/model.pt）")
        if name in ("eval", "robustness"):
            p.add_argument("--head", help="分割头文件")
        if name in ("train-seg", "eval", "robustness"):
            p.add_argument("--timesteps", help="特征时间步，如 50 或 50,150,250")
            p.add_argument("--blocks", help="解码块，如 8-12")
        if name == "train-seg":
            p.add_argument("--seeds", help="种子列表，如 0-9")
            p.add_argument("--fraction", type=float, help="标注图像比例")
        if name == "cluster":
            p.add_argument("--k", type=int, help="簇数")
            p.add_argument("--image-index", type=int, help="图像序号")

    sub.add_parser("ablate", parents=[common], help="消融网格")
    return parser


def flag_overrides(args: argparse.Namespace) -> List[str]:
    """把便捷参数转成 --set 覆盖项"""
    overrides: List[str] = []
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "timesteps", None):
        overrides.append(f"features.timesteps={json.dumps(parse_int_list(args.timesteps))}")
    if getattr(args, "blocks", None):
        overrides.append(f"features.blocks={json.dumps(parse_int_list(args.blocks))}")
    if getattr(args, "seeds", None):
        overrides.append(f"metrics.seeds={json.dumps(parse_int_list(args.seeds))}")
    if getattr(args, "fraction", None) is not None:
        overrides.append(f"seghead.label_fraction={args.fraction}")
    if getattr(args, "k", None) is not None:
        overrides.append(f"cluster.k={args.k}")
    if getattr(args, "image_index", None) is not None:
        overrides.append(f"cluster.image_index={args.image_index}")
    return overrides + list(args.overrides)


def build_manager(args: argparse.Namespace) -> ConfigManager:
    manager = ConfigManager()
    if args.config:
        manager.load_config(args.config)
    manager.apply_overrides(flag_overrides(args))
    return manager


def command_kwargs(args: argparse.Namespace) -> Dict[str, Any]:
    """子命令专属参数 → 处理函数的关键字参数"""
    renames = {"checkpoint": "checkpoint", "head": "head_path", "resume": "resume_from"}
    return {target: getattr(args, name) for name, target in renames.items() if hasattr(args, name)}


def dispatch(args: argparse.Namespace) -> Any:
    manager = build_manager(args)
    handler = COMMANDS.get(args.command)
    if handler is None:
        raise ValueError(f"未知子命令: {args.command}")
    return handler(manager, **command_kwargs(args))


def error_payload(error: MDMError, command: Optional[str]) -> Dict[str, Any]:
    payload: Dict[str, Any] = {"error": type(error).__name__, "message": str(error), "command": command}
    if getattr(error, "path", None):
        payload["path"] = error.path
    if getattr(error, "diagnostics", None):
        payload["diagnostics"] = error.diagnostics
    return payload


def run(argv: Optional[List[str]] = None) -> int:
    """执行命令行，返回退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        interactive_menu()
        return EXIT_OK
    try:
        dispatch(args)
    except MDMError as e:
        print(json.dumps(error_payload(e, args.command), ensure_ascii=False, default=str), file=sys.stderr)
        return EXIT_MDM_ERROR
    except Exception:
        traceback.print_exc()
        return EXIT_UNEXPECTED
    return EXIT_OK


# ============================================================================
# 交互菜单
# ============================================================================

def interactive_menu() -> None:
    print("=" * 60)
    print("🎯 掩码扩散表征工具")
    print("=" * 60)
    print("✨ 流程: 合成数据 → 预训练 → 分割头 → 评估 / 消融 / 鲁棒性")
    print("💡 提示: 使用 Ctrl+C 或 ESC 键可以返回上层菜单")
    signal.signal(signal.SIGINT, signal_handler)

    manager = ConfigManager()
    manager.interactive_config()
    manager.print_current_config()

    actions = [
        ('🧪 生成合成数据集', lambda: cmd_synth_data(manager)),
        ('🧠 自监督预训练', lambda: cmd_pretrain(manager)),
        ('🎯 训练分割头并评估', lambda: cmd_train_seg(manager)),
        ('📊 评估已保存的分割头', lambda: cmd_eval(manager)),
        ('🛡️  退化鲁棒性评估', lambda: cmd_robustness(manager)),
        ('🖼️  重建预览', lambda: cmd_reconstruct(manager)),
        ('🔍 特征聚类', lambda: cmd_cluster(manager)),
        ('🔬 消融网格', lambda: cmd_ablate(manager)),
        ('⚙️  修改配置项', lambda: _edit_override(manager)),
        ('❌ 退出程序', None),
    ]
    while True:
        print("\n📋 主菜单:")
        choice = safe_list_input("请选择操作 (ESC返回)", choices=[label for label, _ in actions])
        if choice is None or choice == actions[-1][0]:
            print("👋 程序退出")
            return
        action = dict(actions)[choice]
        try:
            action()
        except KeyboardInterrupt:
            print("\n🔙 返回主菜单")
        except MDMError as e:
            print(f"\n❌ {type(e).__name__}: {e}")
        except Exception as e:
            print(f"\n❌ 操作执行失败: {e}")
            traceback.print_exc()


def _edit_override(manager: ConfigManager) -> None:
    text = safe_text_input("输入覆盖项 section.key=value")
    if text:
        manager.apply_overrides([text])
        manager.validate_config()
        print("✅ 配置已更新")


if __name__ == "__main__":
    sys.exit(run())
