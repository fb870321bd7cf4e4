"""Moves a device buffer between two PEs by host staging and directly over a
channel, then checks both land the same bytes and direct is faster."""

import sys

import charmlet_py as cl

SIZE = 4 << 20


def main() -> int:
    payload = bytes((i * 7 + 3) % 251 for i in range(SIZE))
    with cl.Runtime(pes=2, time_mode="virtual") as rt:
        rt.open_channel(1, 0, 1)
        rt.open_channel(2, 0, 1)
        src = rt.alloc(0, SIZE)
        rt.copy_to_device(src, payload)

        # Host staging: copy out, send host bytes, copy in.
        start = max(rt.now(0), rt.now(1))
        staged = rt.alloc(1, SIZE)
        recv = rt.recv(2, 1, SIZE)
        rt.send(2, 0, rt.copy_to_host(src)).wait()
        rt.copy_to_device(staged, recv.wait().data)
        staged_ns = rt.now(1) - start

        # Direct: device to device on the channel.
        start = max(rt.now(0), rt.now(1))
        direct = rt.alloc(1, SIZE)
        recv = rt.recv(1, 1, direct)
        rt.send(1, 0, src).wait()
        direct_ns = recv.wait().timestamp - start

        same = rt.copy_to_host(staged) == payload and rt.copy_to_host(direct) == payload
    print(f"size {SIZE} B  host-staging {staged_ns / 1e3:.1f} us  direct {direct_ns / 1e3:.1f} us")
    print(f"payload intact: {same}")
    ok = same and direct_ns < staged_ns
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
