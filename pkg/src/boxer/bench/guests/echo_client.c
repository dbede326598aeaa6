/* Plain TCP echo client: echo_client HOST PORT < in > out.
 * Streams stdin to the server and writes everything echoed back to stdout. */
#include <netdb.h>
#include <poll.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/socket.h>
#include <unistd.h>

int main(int argc, char **argv)
{
    if (argc != 3) {
        fprintf(stderr, "usage: %s HOST PORT\n", argv[0]);
        return 2;
    }
    struct addrinfo hints, *res;
    memset(&hints, 0, sizeof hints);
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    int rc = getaddrinfo(argv[1], argv[2], &hints, &res);
    if (rc != 0) {
        fprintf(stderr, "getaddrinfo %s: %s\n", argv[1], gai_strerror(rc));
        return 1;
    }
    int fd = socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd < 0 || connect(fd, res->ai_addr, res->ai_addrlen) < 0) {
        perror("connect");
        return 1;
    }
    freeaddrinfo(res);

    static char in[65536], out[65536];
    size_t have = 0, off = 0;
    int in_open = 1, sent_fin = 0;
    for (;;) {
        struct pollfd p[2] = {{fd, POLLIN, 0}, {0, 0, 0}};
        int np = 1;
        if (have > off)
            p[0].events |= POLLOUT;
        else if (in_open) {
            p[1].fd = 0;
            p[1].events = POLLIN;
            np = 2;
        } else if (!sent_fin) {
            shutdown(fd, SHUT_WR);
            sent_fin = 1;
        }
        if (poll(p, np, -1) < 0) {
            perror("poll");
            return 1;
        }
        if (p[0].revents & (POLLIN | POLLHUP | POLLERR)) {
            ssize_t n = read(fd, out, sizeof out);
            if (n < 0) {
                perror("read");
                return 1;
            }
            if (n == 0)
                break;
            if (fwrite(out, 1, n, stdout) != (size_t)n)
                return 1;
        }
        if (np == 2 && (p[1].revents & (POLLIN | POLLHUP))) {
            ssize_t n = read(0, in, sizeof in);
            if (n <= 0)
                in_open = 0;
            else
                have = n, off = 0;
        }
        if ((p[0].revents & POLLOUT) && have > off) {
            ssize_t w = write(fd, in + off, have - off);
            if (w < 0) {
                perror("write");
                return 1;
            }
            off += w;
        }
    }
    fflush(stdout);
    close(fd);
    return 0;
}
