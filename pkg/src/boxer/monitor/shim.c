/*
 * Process monitor: preloaded into every guest process.
 *
 * Exports C library socket, name and file symbols. Control-path calls are
 * forwarded to the node supervisor over a local service connection; data-path
 * calls (read/write/send/recv/...) and readiness calls (poll/epoll/select)
 * are never touched. No state survives between intercepted calls except the
 * per-thread service connection.
 *
 * Build: cc -shared -fPIC -O2 -o libboxer_pm.so shim.c -ldl -lpthread
 */
#define _GNU_SOURCE
#include <arpa/inet.h>
#include <dlfcn.h>
#include <errno.h>
#include <fcntl.h>
#include <limits.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <pthread.h>
#include <stdarg.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/types.h>
#include <sys/un.h>
#include <sys/utsname.h>
#include <unistd.h>

/* Every exported interception point; keep in sync with monitor/__init__.py. */
const char *const boxer_pm_manifest[] = {
    "socket", "bind", "listen", "accept", "accept4", "connect", "close",
    "getaddrinfo", "freeaddrinfo", "gethostbyname", "gethostbyname2",
    "gethostbyname_r", "gethostname", "uname",
    "open", "open64", "openat", "openat64", "__open_2", "__open64_2",
    "__openat_2", "__openat64_2", "fopen", "fopen64", NULL,
};

enum {
    K_REGISTER = 0x01, K_BIND, K_LISTEN, K_ACCEPT, K_CONNECT,
    K_NAMELOOKUP, K_UNAME, K_PATHREMAP, K_CLOSENOTIFY,
};

enum {
    S_OK = 0, S_WOULD_BLOCK, S_ADDR_IN_USE, S_INVALID_SOCKET, S_INVALID_STATE,
    S_INVALID_ADDRESS, S_CONN_REFUSED, S_HOST_UNREACHABLE, S_TIMEOUT, S_CLOSED,
    S_NOT_FOUND, S_PROTOCOL_ERROR, S_UNAVAILABLE, S_NAME_CONFLICT, S_EXHAUSTED,
};

#define BIND_REUSEPORT 0x01
#define SIGNAL_PEER 0x7f4d4d4du /* 127.77.77.77 */
#define RESP_MAX 8192
#define SVC_FD_FLOOR 600
/* bounds a native accept that lost a race after poll() said readable */
#define LISTEN_RCVTIMEO_US 20000

static int (*real_socket)(int, int, int);
static int (*real_bind)(int, const struct sockaddr *, socklen_t);
static int (*real_listen)(int, int);
static int (*real_accept)(int, struct sockaddr *, socklen_t *);
static int (*real_accept4)(int, struct sockaddr *, socklen_t *, int);
static int (*real_connect)(int, const struct sockaddr *, socklen_t);
static int (*real_close)(int);
static int (*real_getaddrinfo)(const char *, const char *, const struct addrinfo *, struct addrinfo **);
static struct hostent *(*real_gethostbyname)(const char *);
static struct hostent *(*real_gethostbyname2)(const char *, int);
static int (*real_gethostbyname_r)(const char *, struct hostent *, char *, size_t, struct hostent **, int *);
static int (*real_gethostname)(char *, size_t);
static int (*real_uname)(struct utsname *);
static int (*real_open)(const char *, int, ...);
static int (*real_open64)(const char *, int, ...);
static int (*real_openat)(int, const char *, int, ...);
static int (*real_openat64)(int, const char *, int, ...);
static int (*real___open_2)(const char *, int);
static int (*real___open64_2)(const char *, int);
static int (*real___openat_2)(int, const char *, int);
static int (*real___openat64_2)(int, const char *, int);
static FILE *(*real_fopen)(const char *, const char *);
static FILE *(*real_fopen64)(const char *, const char *);

/* configuration read once from the environment */
static char ns_path[sizeof(((struct sockaddr_un *)0)->sun_path)];
static int active;
static uint32_t overlay_net, overlay_mask;

static pthread_once_t init_once = PTHREAD_ONCE_INIT;
static pthread_key_t svc_key;

static __thread int svc_fd = -1;
static __thread pid_t svc_pid;

#define RESOLVE(name) real_##name = dlsym(RTLD_NEXT, #name)

static void svc_thread_exit(void *unused)
{
    (void)unused;
    if (svc_fd >= 0 && svc_pid == getpid())
        real_close(svc_fd);
    svc_fd = -1;
}

static void parse_cidr(const char *cidr)
{
    char buf[64];
    struct in_addr a;
    int bits = 16;
    snprintf(buf, sizeof buf, "%s", cidr);
    char *slash = strchr(buf, '/');
    if (slash) {
        *slash = 0;
        bits = atoi(slash + 1);
    }
    if (bits < 0 || bits > 32 || inet_pton(AF_INET, buf, &a) != 1) {
        active = 0;
        return;
    }
    overlay_mask = bits == 0 ? 0 : 0xffffffffu << (32 - bits);
    overlay_net = ntohl(a.s_addr) & overlay_mask;
}

static void init(void)
{
    RESOLVE(socket); RESOLVE(bind); RESOLVE(listen); RESOLVE(accept);
    RESOLVE(accept4); RESOLVE(connect); RESOLVE(close); RESOLVE(getaddrinfo);
    RESOLVE(gethostbyname); RESOLVE(gethostbyname2); RESOLVE(gethostbyname_r);
    RESOLVE(gethostname); RESOLVE(uname); RESOLVE(open); RESOLVE(open64);
    RESOLVE(openat); RESOLVE(openat64); RESOLVE(__open_2); RESOLVE(__open64_2);
    RESOLVE(__openat_2); RESOLVE(__openat64_2); RESOLVE(fopen); RESOLVE(fopen64);

    const char *dir = getenv("BOXER_DIR");
    if (dir && *dir && strlen(dir) + sizeof("/ns.sock") <= sizeof ns_path) {
        snprintf(ns_path, sizeof ns_path, "%s/ns.sock", dir);
        active = 1;
    }
    const char *cidr = getenv("BOXER_OVERLAY_CIDR");
    parse_cidr(cidr && *cidr ? cidr : "10.77.0.0/16");
    pthread_key_create(&svc_key, svc_thread_exit);
}

static inline void ensure(void) { pthread_once(&init_once, init); }

__attribute__((constructor)) static void boxer_pm_ctor(void) { ensure(); }

static inline int in_overlay(uint32_t host_order_ip)
{
    return (host_order_ip & overlay_mask) == overlay_net;
}

static int status_errno(int status)
{
    switch (status) {
    case S_OK: return 0;
    case S_WOULD_BLOCK: return EAGAIN;
    case S_ADDR_IN_USE: return EADDRINUSE;
    case S_INVALID_SOCKET: return ENOTSOCK;
    case S_INVALID_STATE: return EINVAL;
    case S_INVALID_ADDRESS: return EADDRNOTAVAIL;
    case S_CONN_REFUSED: return ECONNREFUSED;
    case S_HOST_UNREACHABLE: return EHOSTUNREACH;
    case S_TIMEOUT: return ETIMEDOUT;
    case S_CLOSED: return EINVAL;
    case S_NOT_FOUND: return ENOENT;
    case S_PROTOCOL_ERROR: return EPROTO;
    case S_NAME_CONFLICT: return EEXIST;
    case S_EXHAUSTED: return ENOSPC;
    default: return ECONNRESET;
    }
}

/* ---- service connection ------------------------------------------------ */

static void svc_drop(void)
{
    if (svc_fd >= 0)
        real_close(svc_fd);
    svc_fd = -1;
}

static int svc_get(void)
{
    pid_t pid = getpid();
    if (svc_fd >= 0 && svc_pid == pid)
        return svc_fd;
    if (svc_fd >= 0) {
        /* inherited across fork: the parent still owns the connection */
        real_close(svc_fd);
        svc_fd = -1;
    }
    int fd = real_socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0)
        return -1;
    struct sockaddr_un sa;
    memset(&sa, 0, sizeof sa);
    sa.sun_family = AF_UNIX;
    memcpy(sa.sun_path, ns_path, sizeof ns_path);
    if (real_connect(fd, (struct sockaddr *)&sa, sizeof sa) < 0) {
        real_close(fd);
        return -1;
    }
    /* keep clear of low descriptor numbers guests like to dup2 onto */
    int high = fcntl(fd, F_DUPFD_CLOEXEC, SVC_FD_FLOOR);
    if (high >= 0) {
        real_close(fd);
        fd = high;
    }
    svc_fd = fd;
    svc_pid = pid;
    pthread_setspecific(svc_key, (void *)1);
    return fd;
}

static int read_full(int fd, uint8_t *buf, size_t n, int *recv_fd, int interruptible)
{
    size_t got = 0;
    while (got < n) {
        struct iovec iov = { buf + got, n - got };
        union { struct cmsghdr h; char b[CMSG_SPACE(sizeof(int) * 4)]; } cbuf;
        struct msghdr mh;
        memset(&mh, 0, sizeof mh);
        mh.msg_iov = &iov;
        mh.msg_iovlen = 1;
        mh.msg_control = cbuf.b;
        mh.msg_controllen = sizeof cbuf.b;
        ssize_t r = recvmsg(fd, &mh, MSG_CMSG_CLOEXEC);
        if (r < 0) {
            if (errno == EINTR && !interruptible)
                continue;
            return -1;
        }
        if (r == 0) {
            errno = ECONNRESET;
            return -1;
        }
        for (struct cmsghdr *c = CMSG_FIRSTHDR(&mh); c; c = CMSG_NXTHDR(&mh, c)) {
            if (c->cmsg_level != SOL_SOCKET || c->cmsg_type != SCM_RIGHTS)
                continue;
            int nfd = (c->cmsg_len - CMSG_LEN(0)) / sizeof(int);
            int *fds = (int *)CMSG_DATA(c);
            for (int i = 0; i < nfd; i++) {
                if (recv_fd && *recv_fd < 0)
                    *recv_fd = fds[i];
                else
                    real_close(fds[i]);
            }
        }
        got += (size_t)r;
    }
    return 0;
}

/*
 * One request/response exchange. Returns the response status (>= 0), or -1
 * with errno set when the supervisor is unreachable or the exchange broke.
 * resp receives the response body after its status byte.
 */
static int svc_call(uint8_t kind, const uint8_t *body, uint32_t blen, int send_fd,
                    uint8_t *resp, uint32_t *rlen, int *recv_fd, int interruptible)
{
    if (recv_fd)
        *recv_fd = -1;
    int fd = svc_get();
    if (fd < 0) {
        errno = ECONNRESET;
        return -1;
    }
    uint8_t head[5];
    uint32_t len = blen + 1;
    head[0] = len >> 24; head[1] = len >> 16; head[2] = len >> 8; head[3] = len;
    head[4] = kind;
    struct iovec iov[2] = { { head, 5 }, { (void *)body, blen } };
    union { struct cmsghdr h; char b[CMSG_SPACE(sizeof(int))]; } cbuf;
    struct msghdr mh;
    memset(&mh, 0, sizeof mh);
    mh.msg_iov = iov;
    mh.msg_iovlen = blen ? 2 : 1;
    if (send_fd >= 0) {
        memset(&cbuf, 0, sizeof cbuf);
        mh.msg_control = cbuf.b;
        mh.msg_controllen = sizeof cbuf.b;
        struct cmsghdr *c = CMSG_FIRSTHDR(&mh);
        c->cmsg_level = SOL_SOCKET;
        c->cmsg_type = SCM_RIGHTS;
        c->cmsg_len = CMSG_LEN(sizeof(int));
        memcpy(CMSG_DATA(c), &send_fd, sizeof(int));
    }
    size_t total = 5 + blen, sent = 0;
    while (sent < total) {
        ssize_t r = sendmsg(fd, &mh, MSG_NOSIGNAL);
        if (r < 0) {
            if (errno == EINTR)
                continue;
            goto broken;
        }
        sent += (size_t)r;
        /* only the first chunk carries the descriptor */
        mh.msg_control = NULL;
        mh.msg_controllen = 0;
        while (r > 0 && mh.msg_iovlen) {
            if ((size_t)r >= mh.msg_iov[0].iov_len) {
                r -= mh.msg_iov[0].iov_len;
                mh.msg_iov++;
                mh.msg_iovlen--;
            } else {
                mh.msg_iov[0].iov_base = (uint8_t *)mh.msg_iov[0].iov_base + r;
                mh.msg_iov[0].iov_len -= r;
                r = 0;
            }
        }
    }

    uint8_t rhead[6];
    if (read_full(fd, rhead, 6, recv_fd, interruptible) < 0)
        goto broken;
    uint32_t rl = ((uint32_t)rhead[0] << 24) | ((uint32_t)rhead[1] << 16) |
                  ((uint32_t)rhead[2] << 8) | rhead[3];
    if (rl < 2 || rl - 2 > RESP_MAX || rhead[4] != (kind | 0x40)) {
        errno = EPROTO;
        goto broken;
    }
    uint32_t want = rl - 2;
    if (want && read_full(fd, resp, want, recv_fd, 0) < 0)
        goto broken;
    if (rlen)
        *rlen = want;
    return rhead[5];

broken:;
    int saved = errno;
    if (recv_fd && *recv_fd >= 0) {
        real_close(*recv_fd);
        *recv_fd = -1;
    }
    svc_drop();
    errno = saved == EINTR ? EINTR : (saved == EPROTO ? EPROTO : ECONNRESET);
    return -1;
}

/* ---- encoding helpers ---------------------------------------------------- */

static inline uint8_t *put_u8(uint8_t *p, uint8_t v) { *p++ = v; return p; }
static inline uint8_t *put_u16(uint8_t *p, uint16_t v) { *p++ = v >> 8; *p++ = v; return p; }
static inline uint8_t *put_u32(uint8_t *p, uint32_t v)
{
    *p++ = v >> 24; *p++ = v >> 16; *p++ = v >> 8; *p++ = v;
    return p;
}
static inline uint8_t *put_u64(uint8_t *p, uint64_t v)
{
    p = put_u32(p, (uint32_t)(v >> 32));
    return put_u32(p, (uint32_t)v);
}
static inline uint32_t get_u32(const uint8_t *p)
{
    return ((uint32_t)p[0] << 24) | ((uint32_t)p[1] << 16) | ((uint32_t)p[2] << 8) | p[3];
}
static inline uint16_t get_u16(const uint8_t *p) { return (uint16_t)((p[0] << 8) | p[1]); }

static uint8_t *put_str(uint8_t *p, const char *s, size_t max)
{
    size_t n = strnlen(s, max);
    p = put_u16(p, (uint16_t)n);
    memcpy(p, s, n);
    return p + n;
}

/* ---- socket helpers ------------------------------------------------------ */

static int inode_of(int fd, uint64_t *ino)
{
    struct stat st;
    if (fstat(fd, &st) < 0)
        return -1;
    *ino = (uint64_t)st.st_ino;
    return 0;
}

static int is_stream_inet(int fd)
{
    int v = 0;
    socklen_t l = sizeof v;
    if (getsockopt(fd, SOL_SOCKET, SO_TYPE, &v, &l) < 0 || v != SOCK_STREAM)
        return 0;
    l = sizeof v;
    if (getsockopt(fd, SOL_SOCKET, SO_DOMAIN, &v, &l) < 0 || v != AF_INET)
        return 0;
    return 1;
}

static int bound_to_loopback(int fd)
{
    struct sockaddr_in sa;
    socklen_t l = sizeof sa;
    if (getsockname(fd, (struct sockaddr *)&sa, &l) < 0 || sa.sin_family != AF_INET)
        return 0;
    return ntohl(sa.sin_addr.s_addr) == INADDR_LOOPBACK && sa.sin_port != 0;
}

static void copy_sockopt(int from, int to, int level, int name)
{
    int v = 0;
    socklen_t l = sizeof v;
    if (getsockopt(from, level, name, &v, &l) == 0 && v)
        setsockopt(to, level, name, &v, l);
}

static void set_nonblock(int fd, int on)
{
    int fl = fcntl(fd, F_GETFL);
    if (fl >= 0)
        fcntl(fd, F_SETFL, on ? (fl | O_NONBLOCK) : (fl & ~O_NONBLOCK));
}

static void fill_sockaddr(struct sockaddr *addr, socklen_t *alen, const uint8_t *wire)
{
    if (!addr || !alen)
        return;
    struct sockaddr_in sin;
    memset(&sin, 0, sizeof sin);
    sin.sin_family = AF_INET;
    sin.sin_addr.s_addr = htonl(get_u32(wire));
    sin.sin_port = htons(get_u16(wire + 4));
    socklen_t n = *alen < sizeof sin ? *alen : sizeof sin;
    memcpy(addr, &sin, n);
    *alen = sizeof sin;
}

static void notify_close(int fd)
{
    uint64_t ino;
    uint8_t body[8], resp[16];
    uint32_t rl;
    if (inode_of(fd, &ino) < 0)
        return;
    put_u64(body, ino);
    svc_call(K_CLOSENOTIFY, body, 8, -1, resp, &rl, NULL, 0);
}

/* ---- socket calls -------------------------------------------------------- */

int socket(int domain, int type, int protocol)
{
    ensure();
    int fd = real_socket(domain, type, protocol);
    if (fd < 0 || !active || domain != AF_INET || (type & 0xf) != SOCK_STREAM)
        return fd;
    int saved = errno;
    uint64_t ino;
    if (inode_of(fd, &ino) == 0) {
        uint8_t body[8], resp[16];
        uint32_t rl;
        put_u64(body, ino);
        svc_call(K_REGISTER, body, 8, -1, resp, &rl, NULL, 0);
    }
    errno = saved;
    return fd;
}

int bind(int fd, const struct sockaddr *addr, socklen_t len)
{
    ensure();
    if (!active || !addr || len < sizeof(struct sockaddr_in) || addr->sa_family != AF_INET)
        return real_bind(fd, addr, len);
    const struct sockaddr_in *sin = (const struct sockaddr_in *)addr;
    uint32_t ip = ntohl(sin->sin_addr.s_addr);
    if ((ip != INADDR_ANY && !in_overlay(ip)) || !is_stream_inet(fd))
        return real_bind(fd, addr, len);

    /* a real loopback socket for the guest to poll on */
    struct sockaddr_in lo;
    memset(&lo, 0, sizeof lo);
    lo.sin_family = AF_INET;
    lo.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (real_bind(fd, (struct sockaddr *)&lo, sizeof lo) < 0)
        return -1;

    uint64_t ino;
    if (inode_of(fd, &ino) < 0)
        return -1;
    int reuse = 0;
    socklen_t rl_ = sizeof reuse;
    getsockopt(fd, SOL_SOCKET, SO_REUSEPORT, &reuse, &rl_);
    uint8_t body[15], *p = body, resp[16];
    uint32_t rl;
    p = put_u64(p, ino);
    p = put_u32(p, ip);
    p = put_u16(p, ntohs(sin->sin_port));
    p = put_u8(p, reuse ? BIND_REUSEPORT : 0);
    int st = svc_call(K_BIND, body, (uint32_t)(p - body), -1, resp, &rl, NULL, 0);
    if (st < 0) {
        errno = ECONNRESET;
        return -1;
    }
    if (st != S_OK) {
        errno = status_errno(st);
        return -1;
    }
    return 0;
}

int listen(int fd, int backlog)
{
    ensure();
    if (!active || !is_stream_inet(fd) || !bound_to_loopback(fd))
        return real_listen(fd, backlog);
    if (real_listen(fd, backlog) < 0)
        return -1;
    int saved = errno;
    uint64_t ino;
    if (inode_of(fd, &ino) < 0)
        return 0;
    uint8_t body[12], resp[16];
    uint32_t rl;
    put_u32(put_u64(body, ino), (uint32_t)(backlog < 0 ? 0 : backlog));
    /* the supervisor learns the loopback port from the descriptor itself */
    int st = svc_call(K_LISTEN, body, 12, fd, resp, &rl, NULL, 0);
    if (st < 0 || st == S_INVALID_SOCKET || st == S_INVALID_STATE) {
        /* natively bound loopback socket the overlay does not manage; an
           overlay bind would already have needed the supervisor */
        errno = saved;
        return 0;
    }
    if (st != S_OK) {
        errno = status_errno(st);
        return -1;
    }
    struct timeval tv = { 0, LISTEN_RCVTIMEO_US };
    setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    errno = saved;
    return 0;
}

static int accept_native(int fd, struct sockaddr *addr, socklen_t *alen, int flags, int four)
{
    return four ? real_accept4(fd, addr, alen, flags) : real_accept(fd, addr, alen);
}

static int overlay_listener(int fd)
{
    int v = 0;
    socklen_t l = sizeof v;
    if (getsockopt(fd, SOL_SOCKET, SO_ACCEPTCONN, &v, &l) < 0 || !v)
        return 0;
    return is_stream_inet(fd) && bound_to_loopback(fd);
}

static int do_accept(int fd, struct sockaddr *addr, socklen_t *alen, int flags, int four)
{
    ensure();
    if (!active || !overlay_listener(fd))
        return accept_native(fd, addr, alen, flags, four);
    int fl = fcntl(fd, F_GETFL);
    int blocking = fl >= 0 && !(fl & O_NONBLOCK);

    /* 1-2: drain the real socket first, discarding signal connections */
    for (;;) {
        if (blocking) {
            struct pollfd pfd = { fd, POLLIN, 0 };
            if (poll(&pfd, 1, 0) <= 0 || !(pfd.revents & POLLIN))
                break;
        }
        struct sockaddr_in peer;
        socklen_t pl = sizeof peer;
        int c = real_accept4(fd, (struct sockaddr *)&peer, &pl, flags);
        if (c < 0) {
            if (errno == EAGAIN || errno == EWOULDBLOCK)
                break;
            if (errno == EINTR || errno == ECONNABORTED)
                continue;
            return -1;
        }
        if (peer.sin_family == AF_INET && ntohl(peer.sin_addr.s_addr) == SIGNAL_PEER) {
            real_close(c);
            continue;
        }
        /* somebody dialled the loopback port directly: plain native connection */
        if (addr && alen) {
            socklen_t n = *alen < pl ? *alen : pl;
            memcpy(addr, &peer, n);
            *alen = pl;
        }
        return c;
    }

    /* 3-4: ask the supervisor; blocking requests park on this connection */
    uint64_t ino;
    if (inode_of(fd, &ino) < 0)
        return -1;
    uint8_t body[9], resp[RESP_MAX];
    uint32_t rl = 0;
    put_u8(put_u64(body, ino), (uint8_t)blocking);
    int rfd = -1;
    int st = svc_call(K_ACCEPT, body, 9, -1, resp, &rl, &rfd, blocking);
    if (st == S_INVALID_SOCKET)
        return accept_native(fd, addr, alen, flags, four);
    if (st < 0) {
        if (errno != EINTR)
            errno = ECONNABORTED;
        return -1;
    }
    if (st != S_OK || rfd < 0) {
        if (rfd >= 0)
            real_close(rfd);
        errno = st == S_OK ? EPROTO : status_errno(st);
        return -1;
    }
    if (!(flags & SOCK_CLOEXEC))
        fcntl(rfd, F_SETFD, 0);
    /* the supervisor's copy was non-blocking; accept4 semantics decide */
    set_nonblock(rfd, flags & SOCK_NONBLOCK);
    copy_sockopt(fd, rfd, IPPROTO_TCP, TCP_NODELAY);
    copy_sockopt(fd, rfd, SOL_SOCKET, SO_KEEPALIVE);
    if (rl >= 6)
        fill_sockaddr(addr, alen, resp);
    return rfd;
}

int accept(int fd, struct sockaddr *addr, socklen_t *alen)
{
    return do_accept(fd, addr, alen, 0, 0);
}

int accept4(int fd, struct sockaddr *addr, socklen_t *alen, int flags)
{
    return do_accept(fd, addr, alen, flags, 1);
}

int connect(int fd, const struct sockaddr *addr, socklen_t len)
{
    ensure();
    if (!active || !addr || len < sizeof(struct sockaddr_in) || addr->sa_family != AF_INET ||
        !is_stream_inet(fd))
        return real_connect(fd, addr, len);
    const struct sockaddr_in *sin = (const struct sockaddr_in *)addr;
    uint32_t ip = ntohl(sin->sin_addr.s_addr);
    if (!in_overlay(ip)) {
        int r = real_connect(fd, addr, len);
        int saved = errno;
        /* the socket will never carry overlay state: drop its table entry */
        if (r == 0 || saved == EINPROGRESS)
            notify_close(fd);
        errno = saved;
        return r;
    }
    int fl = fcntl(fd, F_GETFL);
    int blocking = fl >= 0 && !(fl & O_NONBLOCK);
    uint64_t ino;
    if (inode_of(fd, &ino) < 0)
        return -1;
    uint8_t body[15], *p = body, resp[RESP_MAX];
    uint32_t rl;
    p = put_u64(p, ino);
    p = put_u32(p, ip);
    p = put_u16(p, ntohs(sin->sin_port));
    p = put_u8(p, (uint8_t)blocking);
    int rfd = -1;
    int st = svc_call(K_CONNECT, body, (uint32_t)(p - body), -1, resp, &rl, &rfd, 0);
    if (st < 0) {
        errno = ECONNREFUSED;
        return -1;
    }
    if (st != S_OK || rfd < 0) {
        if (rfd >= 0)
            real_close(rfd);
        errno = st == S_OK ? EPROTO : status_errno(st);
        return -1;
    }
    /* splice the connected stream onto the guest's own descriptor number */
    copy_sockopt(fd, rfd, IPPROTO_TCP, TCP_NODELAY);
    copy_sockopt(fd, rfd, SOL_SOCKET, SO_KEEPALIVE);
    set_nonblock(rfd, fl >= 0 && (fl & O_NONBLOCK));
    int fdfl = fcntl(fd, F_GETFD);
    if (dup3(rfd, fd, (fdfl >= 0 && (fdfl & FD_CLOEXEC)) ? O_CLOEXEC : 0) < 0) {
        int saved = errno;
        real_close(rfd);
        errno = saved;
        return -1;
    }
    real_close(rfd);
    return 0;
}

int close(int fd)
{
    ensure();
    if (fd == svc_fd && svc_pid == getpid()) {
        svc_fd = -1;
        return real_close(fd);
    }
    if (active && fd >= 0) {
        int saved = errno;
        int type = 0, domain = 0;
        socklen_t l = sizeof type;
        if (getsockopt(fd, SOL_SOCKET, SO_TYPE, &type, &l) == 0 && type == SOCK_STREAM) {
            l = sizeof domain;
            getsockopt(fd, SOL_SOCKET, SO_DOMAIN, &domain, &l);
            if (domain == AF_INET) {
                int acc = 0;
                l = sizeof acc;
                getsockopt(fd, SOL_SOCKET, SO_ACCEPTCONN, &acc, &l);
                struct sockaddr_in peer;
                socklen_t pl = sizeof peer;
                /* listening or never-connected sockets may have table entries */
                if (acc || (getpeername(fd, (struct sockaddr *)&peer, &pl) < 0 && errno == ENOTCONN))
                    notify_close(fd);
            }
        }
        errno = saved;
    }
    return real_close(fd);
}

/* ---- names --------------------------------------------------------------- */

/* Returns number of IPv4 addresses (host order) written to out, 0 if none. */
static int lookup(const char *name, uint32_t *out, int max)
{
    if (!active || !name || !*name)
        return 0;
    struct in_addr tmp;
    if (inet_pton(AF_INET, name, &tmp) == 1)
        return 0;
    uint8_t body[260], resp[RESP_MAX], *p = body;
    uint32_t rl = 0;
    p = put_str(p, name, 255);
    int saved = errno;
    int st = svc_call(K_NAMELOOKUP, body, (uint32_t)(p - body), -1, resp, &rl, NULL, 0);
    errno = saved;
    if (st != S_OK || rl < 1)
        return 0;
    int n = resp[0];
    if ((uint32_t)(1 + 4 * n) > rl)
        return 0;
    if (n > max)
        n = max;
    for (int i = 0; i < n; i++)
        out[i] = get_u32(resp + 1 + 4 * i);
    return n;
}

static struct addrinfo *make_ai(uint32_t ip, uint16_t port, int socktype, int protocol)
{
    struct addrinfo *ai = calloc(1, sizeof(struct addrinfo) + sizeof(struct sockaddr_in));
    if (!ai)
        return NULL;
    struct sockaddr_in *sin = (struct sockaddr_in *)(ai + 1);
    sin->sin_family = AF_INET;
    sin->sin_port = htons(port);
    sin->sin_addr.s_addr = htonl(ip);
    ai->ai_family = AF_INET;
    ai->ai_socktype = socktype;
    ai->ai_protocol = protocol;
    ai->ai_addrlen = sizeof *sin;
    ai->ai_addr = (struct sockaddr *)sin;
    return ai;
}

/* same layout glibc uses, so this also frees native results */
void freeaddrinfo(struct addrinfo *ai)
{
    while (ai) {
        struct addrinfo *next = ai->ai_next;
        free(ai->ai_canonname);
        free(ai);
        ai = next;
    }
}

int getaddrinfo(const char *node, const char *service, const struct addrinfo *hints,
                struct addrinfo **res)
{
    ensure();
    int flags = hints ? hints->ai_flags : 0;
    int family = hints ? hints->ai_family : AF_UNSPEC;
    if (!active || !node || (flags & AI_NUMERICHOST) || (family != AF_UNSPEC && family != AF_INET))
        return real_getaddrinfo(node, service, hints, res);
    uint32_t ips[16];
    int n = lookup(node, ips, 16);
    if (n == 0)
        return real_getaddrinfo(node, service, hints, res);

    int want = hints ? hints->ai_socktype : 0;
    int proto = hints ? hints->ai_protocol : 0;
    uint16_t port = 0;
    if (service && *service) {
        char *end;
        long v = strtol(service, &end, 10);
        if (*end == 0 && v >= 0 && v <= 65535) {
            port = (uint16_t)v;
        } else if (flags & AI_NUMERICSERV) {
            return EAI_NONAME;
        } else {
            struct servent *se = getservbyname(service, want == SOCK_DGRAM ? "udp" : "tcp");
            if (!se)
                return EAI_SERVICE;
            port = ntohs((uint16_t)se->s_port);
        }
    }
    static const int types[3][2] = {
        { SOCK_STREAM, IPPROTO_TCP }, { SOCK_DGRAM, IPPROTO_UDP }, { SOCK_RAW, 0 },
    };
    struct addrinfo *head = NULL, **tail = &head;
    for (int i = 0; i < n; i++) {
        for (int t = 0; t < 3; t++) {
            if (want && want != types[t][0])
                continue;
            int pr = types[t][1];
            if (proto && want)
                pr = proto;
            struct addrinfo *ai = make_ai(ips[i], port, types[t][0], pr);
            if (!ai) {
                freeaddrinfo(head);
                return EAI_MEMORY;
            }
            *tail = ai;
            tail = &ai->ai_next;
        }
    }
    if (!head)
        return EAI_SOCKTYPE;
    if (flags & AI_CANONNAME)
        head->ai_canonname = strdup(node);
    *res = head;
    return 0;
}

static struct hostent *fill_hostent(struct hostent *he, char *buf, size_t buflen,
                                    const char *name, const uint32_t *ips, int n)
{
    size_t namelen = strlen(name) + 1;
    size_t need = namelen + sizeof(char *) * (size_t)(n + 2) + 4 * (size_t)n + sizeof(char *);
    if (need > buflen)
        return NULL;
    char **aliases = (char **)buf;
    char **list = aliases + 1;
    char *addrs = (char *)(list + n + 1);
    char *nm = addrs + 4 * n;
    aliases[0] = NULL;
    for (int i = 0; i < n; i++) {
        uint32_t be = htonl(ips[i]);
        memcpy(addrs + 4 * i, &be, 4);
        list[i] = addrs + 4 * i;
    }
    list[n] = NULL;
    memcpy(nm, name, namelen);
    he->h_name = nm;
    he->h_aliases = aliases;
    he->h_addrtype = AF_INET;
    he->h_length = 4;
    he->h_addr_list = list;
    return he;
}

struct hostent *gethostbyname(const char *name)
{
    static struct hostent he;
    static char buf[1024];
    ensure();
    uint32_t ips[16];
    int n = lookup(name, ips, 16);
    if (n && fill_hostent(&he, buf, sizeof buf, name, ips, n))
        return &he;
    return real_gethostbyname(name);
}

struct hostent *gethostbyname2(const char *name, int af)
{
    ensure();
    if (af == AF_INET)
        return gethostbyname(name);
    return real_gethostbyname2(name, af);
}

int gethostbyname_r(const char *name, struct hostent *ret, char *buf, size_t buflen,
                    struct hostent **result, int *h_errnop)
{
    ensure();
    uint32_t ips[16];
    int n = lookup(name, ips, 16);
    if (n) {
        if (!fill_hostent(ret, buf, buflen, name, ips, n)) {
            *result = NULL;
            return ERANGE;
        }
        *result = ret;
        if (h_errnop)
            *h_errnop = 0;
        return 0;
    }
    return real_gethostbyname_r(name, ret, buf, buflen, result, h_errnop);
}

static int node_name(char *out, size_t max)
{
    if (!active)
        return -1;
    uint8_t resp[RESP_MAX];
    uint32_t rl = 0;
    int saved = errno;
    int st = svc_call(K_UNAME, NULL, 0, -1, resp, &rl, NULL, 0);
    errno = saved;
    if (st != S_OK || rl < 2)
        return -1;
    uint16_t n = get_u16(resp);
    if ((uint32_t)n + 2 > rl || n == 0)
        return -1;
    if (n >= max)
        n = (uint16_t)(max - 1);
    memcpy(out, resp + 2, n);
    out[n] = 0;
    return 0;
}

int uname(struct utsname *buf)
{
    ensure();
    int r = real_uname(buf);
    if (r == 0) {
        char nm[sizeof buf->nodename];
        if (node_name(nm, sizeof nm) == 0)
            memcpy(buf->nodename, nm, sizeof nm);
    }
    return r;
}

int gethostname(char *name, size_t len)
{
    ensure();
    char nm[HOST_NAME_MAX + 1];
    if (node_name(nm, sizeof nm) < 0)
        return real_gethostname(name, len);
    size_t n = strlen(nm);
    if (n + 1 > len) {
        errno = ENAMETOOLONG;
        return -1;
    }
    memcpy(name, nm, n + 1);
    return 0;
}

/* ---- files --------------------------------------------------------------- */

static const char *remap(const char *path, char *out, size_t outlen)
{
    if (!active || !path || path[0] != '/')
        return path;
    size_t n = strnlen(path, PATH_MAX);
    if (n >= PATH_MAX)
        return path;
    uint8_t body[PATH_MAX + 2], resp[RESP_MAX], *p = body;
    uint32_t rl = 0;
    p = put_str(p, path, PATH_MAX);
    int saved = errno;
    int st = svc_call(K_PATHREMAP, body, (uint32_t)(p - body), -1, resp, &rl, NULL, 0);
    errno = saved;
    if (st != S_OK || rl < 2)
        return path;
    uint16_t m = get_u16(resp);
    if ((uint32_t)m + 2 > rl || m == 0 || m >= outlen)
        return path;
    memcpy(out, resp + 2, m);
    out[m] = 0;
    return out;
}

static inline int wants_mode(int flags)
{
    return (flags & O_CREAT) || ((flags & O_TMPFILE) == O_TMPFILE);
}

int open(const char *path, int flags, ...)
{
    ensure();
    mode_t mode = 0;
    if (wants_mode(flags)) {
        va_list ap;
        va_start(ap, flags);
        mode = va_arg(ap, mode_t);
        va_end(ap);
    }
    char buf[PATH_MAX];
    return real_open(remap(path, buf, sizeof buf), flags, mode);
}

int open64(const char *path, int flags, ...)
{
    ensure();
    mode_t mode = 0;
    if (wants_mode(flags)) {
        va_list ap;
        va_start(ap, flags);
        mode = va_arg(ap, mode_t);
        va_end(ap);
    }
    char buf[PATH_MAX];
    return real_open64(remap(path, buf, sizeof buf), flags, mode);
}

int openat(int dirfd, const char *path, int flags, ...)
{
    ensure();
    mode_t mode = 0;
    if (wants_mode(flags)) {
        va_list ap;
        va_start(ap, flags);
        mode = va_arg(ap, mode_t);
        va_end(ap);
    }
    char buf[PATH_MAX];
    return real_openat(dirfd, remap(path, buf, sizeof buf), flags, mode);
}

int openat64(int dirfd, const char *path, int flags, ...)
{
    ensure();
    mode_t mode = 0;
    if (wants_mode(flags)) {
        va_list ap;
        va_start(ap, flags);
        mode = va_arg(ap, mode_t);
        va_end(ap);
    }
    char buf[PATH_MAX];
    return real_openat64(dirfd, remap(path, buf, sizeof buf), flags, mode);
}

int __open_2(const char *path, int flags)
{
    ensure();
    char buf[PATH_MAX];
    return real___open_2(remap(path, buf, sizeof buf), flags);
}

int __open64_2(const char *path, int flags)
{
    ensure();
    char buf[PATH_MAX];
    return real___open64_2(remap(path, buf, sizeof buf), flags);
}

int __openat_2(int dirfd, const char *path, int flags)
{
    ensure();
    char buf[PATH_MAX];
    return real___openat_2(dirfd, remap(path, buf, sizeof buf), flags);
}

int __openat64_2(int dirfd, const char *path, int flags)
{
    ensure();
    char buf[PATH_MAX];
    return real___openat64_2(dirfd, remap(path, buf, sizeof buf), flags);
}

FILE *fopen(const char *path, const char *mode)
{
    ensure();
    char buf[PATH_MAX];
    return real_fopen(remap(path, buf, sizeof buf), mode);
}

FILE *fopen64(const char *path, const char *mode)
{
    ensure();
    char buf[PATH_MAX];
    return real_fopen64(remap(path, buf, sizeof buf), mode);
}
