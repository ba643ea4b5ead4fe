"""
Command-line entry point for jcimage

jcimage turns Java Card Assembly (JCA) packages into the artifacts a
Java Card VM on a microcontroller needs: CAP files, the native method
dispatcher header (jni.h) and an Intel HEX image of the initial flash
state.

Commands:
- build: config + JCA directory -> flash.hex, flash.bin, jni.h, cap/, report
- fs dump: list every block of a flash image
- fs get <tag-hex>: print the data stored under a tag
- fs verify: re-check every hashsum and report the garbage ratio

Exit codes: 0 ok, 1 internal error, 2 input error, 3 tag not found.

Author: jcimage maintainers
Version: 1.0.0
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import structlog

from app.config import load_memory_config, settings
from app.core.exceptions import CorruptImageError, InputError, JcImageError, LookupMiss
from app.core.flash_device import FlashDevice
from app.core.flash_fs import BlockState, FlashFileSystem
from app.core.intel_hex import device_from_hex, read_hex_text
from app.core.logging_setup import configure_logging
from app.services.pipeline import run_build

logger = structlog.get_logger()


def _address(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid address {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=settings.APP_NAME, description="JCA to CAP to flash image toolchain")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    commands = parser.add_subparsers(dest="command", required=True)

    build = commands.add_parser("build", help="Build CAP files, jni.h and the flash image")
    build.add_argument("--config", type=Path, default=None, help="Build configuration (JSON)")
    build.add_argument("--jca-dir", type=Path, required=True, help="Directory searched for *.jca files")
    build.add_argument("--out", type=Path, required=True, help="Output directory")
    build.add_argument("--base-address", type=_address, default=None, help="Flash base address, e.g. 0x08000000")
    build.add_argument("--workers", type=int, default=None, help="Threads for per-package CAP builds")

    fs = commands.add_parser("fs", help="Inspect a flash image")
    fs_commands = fs.add_subparsers(dest="fs_command", required=True)
    for name, help_text in (
        ("dump", "List every block"),
        ("get", "Print the data stored under a tag"),
        ("verify", "Check hashsums and garbage"),
    ):
        sub = fs_commands.add_parser(name, help=help_text)
        if name == "get":
            sub.add_argument("tag", help="Tag as hex, e.g. 00 or 020300")
        sub.add_argument("--image", type=Path, required=True, help="flash.bin or flash.hex")
        sub.add_argument("--config", type=Path, default=None, help="Build configuration giving the geometry")
        sub.add_argument("--base-address", type=_address, default=None, help="Base address of .hex input")
    return parser


# =============================================================================
# COMMANDS
# =============================================================================
def cmd_build(args: argparse.Namespace) -> int:
    result = run_build(args.config, args.jca_dir, args.out, base_address=args.base_address, workers=args.workers)
    report = result.report
    print(
        f"built {len(report.packages)} packages, {report.native_method_count} native methods, "
        f"{report.image_bytes} image bytes in sector {report.target_sector} -> {args.out}"
    )
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


def load_image(image: Path, config_path: Optional[Path], base_address: Optional[int]) -> FlashDevice:
    """
    Load a raw snapshot or an Intel HEX file into a device

    Raises:
        CorruptImageError: unreadable file or size not matching the geometry
    """
    config = load_memory_config(config_path)
    try:
        if image.suffix.lower() == ".hex":
            base = config.base_address if base_address is None else base_address
            return device_from_hex(read_hex_text(image), config.sector_sizes, base)
        raw = image.read_bytes()
    except OSError as exc:
        raise CorruptImageError(reason=f"cannot read {image}: {exc.strerror or exc}") from exc
    expected = sum(config.sector_sizes)
    if len(raw) != expected:
        raise CorruptImageError(reason=f"{image} is {len(raw)} bytes, the geometry needs {expected}")
    return FlashDevice(config.sector_sizes, cells=raw)


def cmd_fs(args: argparse.Namespace) -> int:
    device = load_image(args.image, args.config, args.base_address)
    # inspection never writes: no repair at mount
    fs = FlashFileSystem(device, auto_repair=False)

    if args.fs_command == "dump":
        for block in fs.blocks():
            crc = "crc-ok" if block.crc_ok else "crc-bad"
            print(f"{block.state.value} {block.tag.hex().upper()} {block.data_len} {crc}")
        return 0

    if args.fs_command == "get":
        try:
            tag = bytes.fromhex(args.tag)
        except ValueError as exc:
            raise InputError(f"invalid tag hex {args.tag!r}") from exc
        data = fs.read(tag)
        if data is None:
            raise LookupMiss(tag=tag.hex().upper())
        print(data.hex().upper())
        return 0

    blocks = fs.blocks()
    bad = [b for b in blocks if b.state is BlockState.BAD_CRC]
    stats = fs.stats()
    print(f"blocks {len(blocks)}")
    print(f"valid {sum(1 for b in blocks if b.state is BlockState.VALID)}")
    print(f"bad-crc {len(bad)}")
    print(f"garbage-bytes {stats['garbage_bytes']}")
    print(f"garbage-ratio {stats['garbage_ratio']:.4f}")
    if bad or stats["corrupt_sectors"]:
        raise CorruptImageError(
            reason=f"{len(bad)} blocks fail their checksum, corrupt sectors {stats['corrupt_sectors']}"
        )
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(level="DEBUG" if args.verbose else None)
    handler = cmd_build if args.command == "build" else cmd_fs
    try:
        return handler(args)
    except JcImageError as exc:
        logger.error("Command failed", command=args.command, error=str(exc), error_type=type(exc).__name__)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.exception("Unexpected failure", command=args.command)
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
